"""
Terminal costs and the minimum stabilizing horizon
==================================================

Economic MPC with terminal cost Vominus does not stabilize the cubic example
for any horizon. Raising the terminal cost towards V+ fixes this; moving
along the segment Vominus + r (V+ - Vominus) is far more effective than adding
a quadratic r |x|^2.

The grid controller can only apply quantized inputs, and the origin is
open-loop unstable, so closed loops settle into a small limit cycle. The
convergence ball is taken as the extent of that cycle under V_f = V+.
"""

from dissdp.mpc import (
    TerminalCostSpec,
    convergence_profile,
    min_stabilizing_horizon,
    practical_radius,
)
from dissdp.pipelines import Workspace
from dissdp.model import get_model

ws = Workspace(get_model("nonlinear"))
model, grids = ws.model, ws.grids
vp, vom = ws.v_plus.value, ws.v_ominus.value

radius = practical_radius(model, grids, vp)
print("convergence ball half-widths:", radius)

# %%
for spec in (TerminalCostSpec("v_ominus"), TerminalCostSpec("vf2", r=0.5), TerminalCostSpec("vf1", r=1.0)):
    hz = min_stabilizing_horizon(model, grids, spec, 8, vp, vom, radius=radius)
    print(f"{spec.label:>12}: N_s = {hz.value}")

# %%
# How fast V_N approaches V+ for the segment terminal cost.
prof = convergence_profile(model, grids, TerminalCostSpec("vf2", r=0.5), 10, vp, vom)
print("max |V_N - V+|, N = 1..10:", ["%.2g" % p for p in prof])
