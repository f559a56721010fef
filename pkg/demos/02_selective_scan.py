"""The selective-scan recurrence and its four-direction 2D extension.

    h_t = exp(delta_t * A) h_{t-1} + (delta_t B_t) u_t,   y_t = <C_t, h_t> + D u_t

delta, B and C are data-dependent per token, so the state both decays and
listens selectively.  The 2D version runs the recurrence along four axis
traversals (rows, rows reversed, columns, columns reversed) and sums them.
"""

import numpy as np

from contrast_sr.ssm import cross_merge, cross_scan, selective_scan
from contrast_sr.tensor import Tensor

rng = np.random.default_rng(0)
b, L, c, n = 1, 12, 2, 2

u = Tensor(rng.normal(size=(b, L, c)))
delta = Tensor(rng.uniform(0.05, 0.4, size=(b, L, c)))
A = Tensor(-rng.uniform(0.5, 1.5, size=(c, n)))   # negative: the state decays
B = Tensor(rng.normal(size=(b, L, n)))
C = Tensor(rng.normal(size=(b, L, n)))
D = Tensor(np.ones(c))

y_loop = selective_scan(u, delta, A, B, C, D, method="loop")
y_par = selective_scan(u, delta, A, B, C, D, method="parallel")
print("sequential loop vs log-depth parallel scan, max |diff|:",
      np.abs(y_loop.data - y_par.data).max())

# causality: feeding a bump at t=6 leaves earlier outputs untouched
bumped = u.data.copy()
bumped[:, 6] += 10.0
y_bump = selective_scan(Tensor(bumped), delta, A, B, C, D)
print("outputs before the bump unchanged:",
      bool(np.array_equal(y_loop.data[:, :6], y_bump.data[:, :6])))

# -- cross-scan over a tiny image ----------------------------------------------------

img = Tensor(np.arange(1.0, 5.0).reshape(1, 1, 2, 2))
seqs = cross_scan(img)
print("2x2 image [[1,2],[3,4]] traversals:")
for name, d in zip(("row fwd", "row rev", "col fwd", "col rev"), range(4)):
    print(f"  {name}: {seqs.data[0, d, :, 0]}")

merged = cross_merge(seqs, 2, 2)
print("merge of untouched traversals = 4x the image:",
      bool(np.allclose(merged.data, 4 * img.data)))

# the pair is mutually adjoint, which is exactly its hand-written gradient
x = rng.normal(size=(1, 3, 4, 4))
g = rng.normal(size=(1, 4, 16, 3))
lhs = (cross_scan(Tensor(x)).data * g).sum()
rhs = (x * cross_merge(Tensor(g), 4, 4).data).sum()
print("adjointness <S(x), g> - <x, M(g)>:", abs(lhs - rhs))
