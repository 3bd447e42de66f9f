"""Tour of the convolutional Hadamard basis.

Shows the pattern index layout, that a full noiseless measurement recovers the
image exactly, and how the error falls as coarse (r=0) patterns are added.
"""

import numpy as np

from asense.basis import MeasurementModel, inverse_reconstruct, measure, pattern_coords, pattern_index
from asense.data import synth_dataset

x = synth_dataset(10, 3).images[4]
model = MeasurementModel(noise_sigma=0.0)

print("pattern 0 ->", pattern_coords(0), " pattern 783 ->", pattern_coords(783))
print("(x=3, y=5, r=2) ->", pattern_index(3, 5, 2))

full = measure(x, range(784), model)
print("full measurement, reconstruction mse:", np.mean((inverse_reconstruct(full, model.filter) - x) ** 2))

coarse = [pattern_index(cx, cy, 0) for cy in range(7) for cx in range(7)]
for n in (7, 21, 49):
    rec = inverse_reconstruct(measure(x, coarse[:n], model), model.filter)
    print(f"{n:2d} block-average patterns: mse {np.mean((rec - x) ** 2):.4f}")
