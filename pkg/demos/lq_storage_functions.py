"""
Storage functions for a scalar linear-quadratic problem
=======================================================

The scalar system x+ = x + u with cost x^2 + u^2 has the forward value
function phi*x^2 (phi the golden ratio) as long as the input bound is
inactive. Rotating the stage cost with -V+ gives a nonnegative cost on the
inputs the value function was computed for, and can go negative outside them.
"""

import numpy as np

from dissdp import dp
from dissdp.dissipativity import StorageFunction, check_dissipativity, rotated_cost
from dissdp.grid import default_grids
from dissdp.model import get_model

phi = (1 + np.sqrt(5)) / 2

# %%
# Solve the forward and backward problems on the default 401-node grid.
lq = get_model("lq")
grids = default_grids(lq)
v_plus = dp.solve_forward(lq, grids)
v_minus = dp.solve_backward(lq, grids)
for x in (0.5, 1.0, 1.5):
    print(f"x={x:4.1f}  V+={v_plus.value([x]):8.4f}  phi*x^2={phi * x**2:8.4f}  "
          f"V-={v_minus.value([x]):8.4f}  psi*x^2={(1 - np.sqrt(5)) / 2 * x**2:8.4f}")

# %%
# The rotated cost with lambda = -V+ is zero along the optimal input and
# nonnegative for |u| <= 1.
lam = StorageFunction.from_values(grids[0], -v_plus.value.values, "-V+")
print("L(1, -1/phi) =", rotated_cost(lq, lam, [1.0], [-1 / phi]))
print("plain dissipativity on |u|<=1:", check_dissipativity(lq, grids, lam).passed)

# %%
# Allowing |u| <= 2 exposes inputs for which the same storage fails.
wide = get_model("lq-wide")
wide_grids = default_grids(wide)
rep = check_dissipativity(wide, wide_grids, lam)
print("plain dissipativity on |u|<=2:", rep.passed, " worst pair:", rep.argmin, f"L={rep.min_margin:.3f}")

# %%
# The wide-input value function is a valid storage on the wide box.
v_wide = dp.solve_forward(wide, wide_grids)
lam_wide = StorageFunction.from_values(wide_grids[0], -v_wide.value.values, "-V+ wide")
print("wide storage on |u|<=2:", check_dissipativity(wide, wide_grids, lam_wide).passed)
