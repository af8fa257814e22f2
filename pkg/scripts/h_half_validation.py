"""Spectral H^{1/2} norm vs direct half-plane quadrature, and rescaling invariance."""
from loggas.fluctuations import TestFunction, h_half_norm, h_half_norm_halfplane

if __name__ == "__main__":
    for z, L in ((0.0, 0.5), (0.1, 0.1), (-0.3, 0.02)):
        f = TestFunction.bump(z, L)
        s, q = h_half_norm(f), h_half_norm_halfplane(f)
        print(f"bump z={z:+.2f} L={L:<5}: spectral {s:.6f}  half-plane {q:.6f}  rel {abs(s - q) / s:.1e}")
    base = h_half_norm(TestFunction.bump(0.0, 1.0))
    for L in (0.3, 0.01, 1e-3):
        print(f"rescaling L={L:<6}: |norm - norm(L=1)| = {abs(h_half_norm(TestFunction.bump(0.0, L)) - base):.1e}")
