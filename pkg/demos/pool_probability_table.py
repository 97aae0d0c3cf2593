"""Pooling probability for equal request rates over a few waiting windows."""

import numpy as np

from amod_flow import pool_probability

rates = [5.0, 15.0, 50.0, 150.0]  # requests per hour
windows = [2, 5, 10, 15]  # minutes

print("rate/h " + "".join(f"{w:>9d}m" for w in windows))
for a in rates:
    row = [pool_probability(a, a, w / 60) for w in windows]
    print(f"{a:6.0f} " + "".join(f"{p:10.4f}" for p in row))

# one slow and one fast request: the fast one rarely waits for the slow one
a, b = 2.0, 80.0
print("\nunequal rates (2/h, 80/h):", np.round([pool_probability(a, b, w / 60) for w in windows], 4))
