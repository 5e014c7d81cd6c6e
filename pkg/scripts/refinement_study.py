"""Grid refinement of the discretization diagnostics.

Prints, per grid size, the pooled adjoint-identity residual (zero and
unstable equilibrium), the largest normal component of the boundary normal
derivative of random solenoidal fields, the first Stokes eigenvalue and the
unstable eigenvalue of the standard equilibrium.

    python scripts/refinement_study.py --sizes 16 32 64
"""

import argparse

import numpy as np

from oseenstab.mesh import setup_mesh
from oseenstab.norms import StokesBasis
from oseenstab.operators import (
    MACGrid, adjoint_identity_terms, assemble_dirichlet_map, assemble_oseen, manufactured_field,
    random_boundary_data, random_solenoidal, tangential_trace)
from oseenstab.spectral import compute_spectrum

STOKES_MU1 = 52.3447  # first Dirichlet Stokes eigenvalue of the unit square


def pooled_residual(ops, seed, samples):
    r = np.random.default_rng(seed)
    g = ops.grid
    t = np.array([adjoint_identity_terms(ops, random_solenoidal(g, r), random_boundary_data(g, r))
                  for _ in range(samples)])
    return float(np.abs(t[:, 0] - t[:, 1]).sum() / np.abs(t[:, 1]).sum())


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[16, 32, 64])
    ap.add_argument("--nu0", type=float, default=1e-2)
    ap.add_argument("--amplitude", type=float, default=2.0)
    ap.add_argument("--samples", type=int, default=10)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()

    print(f"{'n':>4} {'adj(zero)':>10} {'adj(unst)':>10} {'normal':>10} {'mu1':>9} {'lambda1':>22}")
    for n in args.sizes:
        g = MACGrid(setup_mesh((n, n), None, "left", 0.5, 2))
        zero = assemble_oseen(g, args.nu0, np.zeros(g.n))
        assemble_dirichlet_map(zero)
        unst = assemble_oseen(g, args.nu0, manufactured_field(g, args.amplitude, "shear-cell"))
        assemble_dirichlet_map(unst)
        r = np.random.default_rng(args.seed)
        normal = max(np.abs(tangential_trace(g, random_solenoidal(g, r))[1]).max() for _ in range(args.samples))
        mu1 = StokesBasis(zero).mu[0]
        lam = compute_spectrum(unst, 6).eigenvalues[0]
        print(f"{n:4d} {pooled_residual(zero, args.seed, args.samples):10.5f} "
              f"{pooled_residual(unst, args.seed, args.samples):10.5f} {normal:10.5f} {mu1:9.4f} "
              f"{lam.real:10.5f}{lam.imag:+10.5f}i")
    print(f"continuum first Stokes eigenvalue: {STOKES_MU1}")


if __name__ == "__main__":
    main()
