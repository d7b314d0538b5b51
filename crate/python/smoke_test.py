"""Smoke test for the bmc_lab extension module.

Build and install the module first, e.g. `maturin develop -m crates/py/Cargo.toml`.
"""

import math

import bmc_lab


def close(x, y, tol=1e-9):
    return abs(x - y) <= tol * max(1.0, abs(y))


def main():
    k = bmc_lab.BarKernel(0.5, 1.0)
    assert k.regime == "sub"
    f = bmc_lab.Observable.identity(k)

    mean, second = bmc_lab.generation_moment(f, 2, k, x0=0.0)
    assert close(mean, 0.0) and close(second, 6.0), (mean, second)

    assert close(bmc_lab.sigma_generation(f, k), 2.0)
    assert close(bmc_lab.sigma_tree(f, k), 6.0)

    crit = bmc_lab.BarKernel.critical()
    assert crit.regime == "critical"
    g = bmc_lab.Observable.identity(crit)
    assert close(bmc_lab.sigma_tree(g, crit), 3.0 + 2.0 * math.sqrt(2.0))

    gen, tree = bmc_lab.simulate(k, f, 6, 200, seed=7)
    assert len(gen) == 200 and len(tree) == 200
    assert bmc_lab.simulate(k, f, 6, 200, seed=7) == (gen, tree)

    report = bmc_lab.clt(k, f, 10, 1000, seed=3)
    assert set(report) == {"generation", "tree"}
    assert report["generation"]["target_asymptotic"] > 0.0

    sup = bmc_lab.BarKernel(0.8)
    ratio = bmc_lab.supercritical_ratio(sup, bmc_lab.Observable.identity(sup), 12, 64, seed=1)
    assert close(ratio["target"], 1.6 / 0.6)

    assert bmc_lab.detect_regime(bmc_lab.BarKernel(0.3))[0] == "sub"
    assert bmc_lab.detect_regime(sup)[0] == "super"

    try:
        bmc_lab.BarKernel(1.5)
    except ValueError:
        pass
    else:
        raise AssertionError("|a| >= 1 must be rejected")

    print("bmc_lab", bmc_lab.__version__, "smoke test passed")


if __name__ == "__main__":
    main()
