"""Smoke test for the rsmfc extension module.

Build first:

    cargo build -p rsmfc-python --release --features extension-module

The script imports an installed `rsmfc` if there is one, otherwise it loads
the freshly built library from target/release.
"""

import json
import math
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]


def load():
    try:
        import rsmfc
        return rsmfc
    except ImportError:
        pass
    for name in ("librsmfc.so", "librsmfc.dylib", "rsmfc.dll"):
        lib = ROOT / "target" / "release" / name
        if lib.exists():
            break
    else:
        sys.exit("extension not built; see the module docstring")
    tmp = Path(tempfile.mkdtemp())
    suffix = ".pyd" if lib.suffix == ".dll" else ".abi3.so"
    shutil.copy(lib, tmp / ("rsmfc" + suffix))
    sys.path.insert(0, str(tmp))
    import rsmfc
    return rsmfc


def main():
    rsmfc = load()

    p = rsmfc.LqParams()
    assert p.sigma == 1e-2 and p.theta == 1e-5, p
    ricc = rsmfc.RiccatiSolution(p)
    assert ricc.beta(1.0) == 1.0
    assert ricc.blow_up_time is None
    table = ricc.tabulate(100)
    assert len(table["beta"]) == 101 and table["first_valid"] == 0

    tau = rsmfc.blow_up_time(p.with_t_end(5.0), "one", "paper_printed")
    assert abs(tau - 1.0) < 1e-3, tau
    printed = rsmfc.RiccatiSolution(p.with_t_end(5.0), "one", "paper_printed")
    try:
        printed.beta(0.0)
    except rsmfc.BlowUpError:
        pass
    else:
        raise AssertionError("expected BlowUpError")
    try:
        rsmfc.LqParams(sigma=float("nan"))
    except ValueError:
        pass
    else:
        raise AssertionError("expected ValueError")

    desk = rsmfc.LqParams(a=0.5, b=1.0, sigma=0.3, theta=0.2)
    sim = rsmfc.simulate_closed_loop(desk, 50, 200, 7)
    assert len(sim["states"]) == 200 and len(sim["t"]) == 51
    assert sim["blow_up_step"] is None
    assert all(math.isfinite(x) for x in sim["mean"])

    base = rsmfc.estimate_cost(desk, 50, 2000, 3)
    worse = rsmfc.estimate_cost(desk, 50, 2000, 3, epsilon=0.5)
    assert base["psi_theta"] < worse["psi_theta"], (base, worse)

    exp = rsmfc.expansion_check(desk, 50, 2000, 3, [0.1, 0.05])
    assert len(exp["ratios"]) == 1

    vi = rsmfc.check_variational_inequality(desk, 50, 100, 3, tolerance=1e-12)
    assert vi["max_violation"] <= 1e-12, vi
    shifted = rsmfc.check_variational_inequality(desk, 50, 100, 3, epsilon=0.5)
    assert shifted["max_violation"] >= 0.1, shifted

    manifest = json.loads(rsmfc.run('[simulation]\nsuites = ["riccati"]\nn_steps = 100\n'))
    assert manifest["passed"] and manifest["suites"][0]["name"] == "riccati"

    print("python smoke test: ok")


if __name__ == "__main__":
    main()
