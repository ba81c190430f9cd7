"""Reference solutions used to score every model.

Viscous Burgers is solved through the Cole-Hopf transform, with the heat-kernel
integrals done by composite Gauss-Legendre quadrature; doubling the nodes gives
an error estimate.  Allen-Cahn uses an exponential-time-differencing Fourier
scheme checked by halving the step.  Helmholtz is manufactured, so exact.
"""
import numpy as np

from pilabel.oracle import allen_cahn_reference, burgers_values, helmholtz_reference, uniform_grid

nu = 0.01 / np.pi
X = np.array([[0.25, 0.3], [0.5, -0.7], [1.0, 0.9], [0.75, 0.05]])
u, err = burgers_values(nu, X, return_error=True)
for (t, x), v in zip(X, u):
    print(f"burgers  t={t:.2f} x={x:+.2f}  u={v:+.12f}")
print(f"node-doubling estimate {err:.1e}")

# the initial hump steepens into thin layers against the walls at x = +-1
x = np.linspace(0.96, 1.0, 5)
print("wall layer at t=1:", np.round(burgers_values(nu, np.column_stack([np.ones(5), x])), 4))

ac = allen_cahn_reference((np.linspace(0, 1, 5), np.linspace(-1, 1, 9)), use_cache=False)
print("\nallen-cahn u(t, x) on a coarse grid (rows: t = 0, .25, .5, .75, 1)")
print(np.array2string(ac.values, precision=3, suppress_small=True))
print(f"step-halving estimate {ac.accuracy_estimate:.1e}")

hz = helmholtz_reference(uniform_grid([[0, 1], [0, 1]], 9))
print("\nhelmholtz provenance:", hz.provenance, " max |u| =", np.abs(hz.values).max())
