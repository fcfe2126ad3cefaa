"""Transport maps, the determinant expansion, and the quadratic KL form.

Shows the density side of refinement: a residual map nudges actions,
the inverse-Jacobian determinant is 1 - div(delta) to first order, and the
KL divergence of the pushforward collapses to the Fisher quadratic form,
verified against a grid-quadrature oracle that inverts the map numerically.

Run:  python3 demos/03_transport_maps_and_kl.py
"""

import numpy as np

from fisherflow import flow, nets, transport
from fisherflow.densities import GaussianMixture

# -- 1. determinant expansion on a linear displacement -------------------------
print("linear displacement delta(a) = c a in 2D: |det grad T^-1| vs 1 - div")
policy = flow.FlowPolicy(flow.VelocityField.create(0, 2, hidden=(4,), rng=0), steps=2)
for c in (0.02, 0.01, 0.005):
    net = nets.DenseNet([2, 2], [c * np.eye(2)], [np.zeros(2)], "gelu")
    tmap = transport.TransportMap(net, policy, max_displacement=1e6)
    res = transport.log_det_inverse_approx(tmap, None, np.zeros(2))
    print(f"  c={c:6.3f}: exact {res.exact_multiplier:.6f}  approx "
          f"{res.approx_multiplier:.6f}  gap {res.gap:.2e}")
print("  the gap falls ~4x per halving: the dropped terms are second order")

# -- 2. quadratic KL vs exact quadrature on a shifted Gaussian -----------------
gauss = GaussianMixture.single([0.0], 1.0)
grid = transport.GridSpec((-9.0,), (9.0,), (4001,))
c = 0.3
kl = transport.kl_quadrature_oracle(gauss, lambda a: a + c, None, grid).value
samples = gauss.sample(np.random.default_rng(1), 10_000)
mc = transport.kl_quadratic(lambda a: np.full_like(a, c), gauss, None, samples)
print(f"\nunit Gaussian, constant shift {c}:")
print(f"  quadrature KL          {kl:.6f} (closed form c^2/2 = {c*c/2:.6f})")
print(f"  Fisher quadratic form  {mc.value:.6f} +- {mc.stderr:.6f} (Monte Carlo)")

# -- 3. the same story on a two-mode mixture -----------------------------------
mix = GaussianMixture([0.5, 0.5], [[-1.0], [1.0]], [[0.36], [0.36]])
grid_m = transport.GridSpec((-10.0,), (10.0,), (20001,))
print("\noverlapping two-mode mixture, shrinking shifts:")
for c in (0.1, 0.05, 0.025):
    kl = transport.kl_quadrature_oracle(mix, lambda a: a + c, None, grid_m).value
    quad = transport.expected_quadratic_penalty(mix, lambda a: np.full_like(a, c), grid_m)
    print(f"  c={c:6.3f}: KL {kl:.3e}  quadratic form {quad:.3e}  "
          f"gap {abs(kl - quad):.2e}")
print("  the quadratic form tracks the KL; the gap dies off at higher order")

# -- 4. the curvature term the quadratic form drops ----------------------------
diag = transport.curvature_term_diagnostic(mix, lambda a: np.full_like(a, 0.3), grid_m)
print(f"\ndropped density-curvature term for a constant shift: {diag:.2e}")
print("  it integrates to zero by the divergence theorem, which is why the")
print("  Fisher form alone captures the KL to second order")
