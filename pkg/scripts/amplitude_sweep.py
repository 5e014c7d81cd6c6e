"""Spectral abscissa of the linearized operator against the equilibrium amplitude.

Shows where the manufactured equilibrium loses stability, which is how the
standard configuration's amplitude was chosen.

    python scripts/amplitude_sweep.py --n 16 --profile shear-cell --amplitudes 0 0.5 1 1.5 2 3 4
"""

import argparse

from oseenstab.mesh import setup_mesh
from oseenstab.operators import PROFILES, MACGrid, assemble_oseen, manufactured_field
from oseenstab.spectral import compute_spectrum


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=16, help="cells per side")
    ap.add_argument("--nu0", type=float, default=1e-2)
    ap.add_argument("--profile", choices=sorted(PROFILES), default="shear-cell")
    ap.add_argument("--amplitudes", type=float, nargs="+", default=[0.0, 1.0, 1.5, 2.0, 3.0, 4.0])
    ap.add_argument("--n-eigs", type=int, default=8)
    args = ap.parse_args()

    g = MACGrid(setup_mesh((args.n, args.n)))
    print(f"{'amplitude':>10} {'abscissa':>12} {'imag':>10} {'unstable':>9}")
    for a in args.amplitudes:
        ops = assemble_oseen(g, args.nu0, manufactured_field(g, a, args.profile))
        try:
            spec = compute_spectrum(ops, args.n_eigs)
        except Exception as exc:
            print(f"{a:10.3f}  failed: {exc}")
            continue
        lam = spec.eigenvalues[0]
        print(f"{a:10.3f} {lam.real:12.5f} {abs(lam.imag):10.4f} {spec.N:9d}")


if __name__ == "__main__":
    main()
