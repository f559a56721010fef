"""A tour of the float64 autodiff engine that everything else runs on.

Every operation records a graph node with a hand-written vector-Jacobian
closure; backward() replays the graph once in reverse topological order.
"""

import numpy as np

import contrast_sr.tensor as T
from contrast_sr.tensor import Tensor

# -- forward + backward on a small expression ------------------------------------

x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
w = Tensor(np.array([0.5, -1.0, 2.0]), requires_grad=True)

loss = (T.gelu(x * w)).sum()
loss.backward()

print("loss        :", loss.item())
print("d loss / dx :", x.grad)
print("d loss / dw :", w.grad)

# -- verify one gradient coordinate by central differences -------------------------

h = 1e-6
base = x.data.copy()
x.data = base + np.array([h, 0, 0])
up = T.gelu(x * w).sum().item()
x.data = base - np.array([h, 0, 0])
down = T.gelu(x * w).sum().item()
x.data = base
print("finite diff :", (up - down) / (2 * h), "vs analytic:", x.grad[0])

# -- broadcasting: gradients fold back onto the original shapes --------------------

a = Tensor(np.ones((3, 1)), requires_grad=True)
b = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
(a * b).sum().backward()
print("broadcast grad of (3,1) input:", a.grad.ravel(), "(= row sums of b)")

# -- the recorded graph is inspectable ---------------------------------------------

y = ((x.reshape(1, 3) @ x.reshape(3, 1)) * 2.0).sum()
nodes = T.graph_nodes(y)
print(f"graph for x.x*2 has {len(nodes)} recorded nodes (inputs before outputs)")
