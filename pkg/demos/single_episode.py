"""Train a tiny bundle for a few seconds and run one active episode per criterion.

The model is far too small to be good; the point is the shape of the loop and
its outputs.  Use the CLI with --profile small for a real desk run.
"""

import numpy as np

from asense.active import EpisodeConfig, run_episode
from asense.basis import pattern_coords
from asense.data import synth_dataset
from asense.training import TrainConfig, train_partial, train_vae

data = synth_dataset(300, 0)
bundle, rep = train_vae(TrainConfig(epochs=3, channels=(4, 8)), data)
bundle, prep = train_partial(TrainConfig(epochs=3, channels=(4, 8)), data, bundle)
print(f"vae loss {rep[0]['mean_loss']:.1f} -> {rep[-1]['mean_loss']:.1f}, "
      f"partial {prep[0]['mean_loss']:.1f} -> {prep[-1]['mean_loss']:.1f}")

target = synth_dataset(20, 1, "test").images[0]
for crit in ("qp", "mi", "ho"):
    traj = run_episode(target, bundle, EpisodeConfig(criterion=crit, candidates=20, steps=10, rng_seed=0))
    first = [pattern_coords(j) for j in traj.patterns[:3]]
    last = traj.records[-1]
    print(f"{crit}: first picks (x, y, r) {first}; after 10 steps ssim {last.ssim:.3f} mse {last.mse:.4f} "
          f"entropy {last.entropy:.1f}")
print("info map of the final qp step is available when record_info_maps=True:")
traj = run_episode(target, bundle, EpisodeConfig(candidates=20, steps=2, record_info_maps=True))
print(np.round(traj.records[-1].info_map, 1))
