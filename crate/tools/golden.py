"""Reference spectra for the forward-model golden tests.

Written against numpy only, vectorized over lines and grid, sharing no code
with the Rust implementation. Regenerate with:

    python3 tools/golden.py crates/core/data/canonical_db.json crates/core/tests/data
"""
import json
import sys
from pathlib import Path

import numpy as np

T_REF = 296.0
C2 = 1.4388


def absorbance(db, nu, t, c):
    lines = db["lines"]
    center = np.array([l["center"] for l in lines])[:, None]
    s_ref = np.array([l["strength_ref"] for l in lines])[:, None]
    e_low = np.array([l["lower_state_energy"] for l in lines])[:, None]
    g_ref = np.array([l["gamma_ref"] for l in lines])[:, None]
    s = s_ref * (T_REF / t) ** 1.5 * np.exp(-C2 * e_low * (1.0 / t - 1.0 / T_REF))
    g = g_ref * np.sqrt(T_REF / t)
    phi = g / np.pi / ((nu[None, :] - center) ** 2 + g**2)
    return db["scale_kappa"] * c * (T_REF / t) * (s * phi).sum(axis=0)


def planck(nu, t):
    # normalized to 1 at 2385 cm^-1 and 2000 K
    raw = lambda n, tt: n**3 / np.expm1(C2 * n / tt)
    return raw(nu, t) / raw(2385.0, 2000.0)


def main(db_path, out_dir):
    db = json.loads(Path(db_path).read_text())
    nu = 2375.0 + 0.1 * np.arange(200)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    a = absorbance(db, nu, 1300.0, 0.06)
    (out / "golden_absorbance.json").write_text(
        json.dumps({"temperature": 1300.0, "mole_fraction": 0.06, "values": [float(v) for v in a]}, indent=1)
    )
    e_a = absorbance(db, nu, 1800.0, 0.3)
    e = -np.expm1(-e_a) * planck(nu, 1800.0)
    (out / "golden_emission.json").write_text(
        json.dumps({"temperature": 1800.0, "mole_fraction": 0.3, "values": [float(v) for v in e]}, indent=1)
    )


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
