"""Smoke test for the `ebsde_lab` extension module.

Build first with `cargo build --release -p ebsde-python` (or `maturin develop`
inside crates/python), then run `python3 python/smoke_test.py` from the
repository root.
"""

import importlib.machinery
import importlib.util
import math
import os
import sys

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load_module():
    try:
        import ebsde_lab

        return ebsde_lab
    except ImportError:
        pass
    path = os.environ.get("EBSDE_LAB_LIB", os.path.join(ROOT, "target", "release", "libebsde_lab.so"))
    if not os.path.exists(path):
        sys.exit(f"extension not found at {path}; build it with cargo build --release -p ebsde-python")
    loader = importlib.machinery.ExtensionFileLoader("ebsde_lab", path)
    spec = importlib.util.spec_from_file_location("ebsde_lab", path, loader=loader)
    module = importlib.util.module_from_spec(spec)
    loader.exec_module(module)
    return module


def main():
    lab = load_module()
    print("ebsde_lab", lab.__version__)

    constant = lab.Experiment.load(os.path.join(ROOT, "configs", "constant.toml"))
    ok, constants = constant.validate()
    assert ok, constants
    sol = constant.solve()
    assert abs(sol.ergodic_constant - 3.0) < 1e-9, sol
    print("constant:", sol)

    ou = lab.Experiment.load(os.path.join(ROOT, "configs", "ou_cos.toml"))
    ou.n_paths = 4000
    sol = ou.solve()
    exact = math.exp(-0.25)
    assert abs(sol.ergodic_constant - exact) / exact < 0.03, sol
    print("ou_cos:", sol, "exact", exact)

    lam, xs, vs = ou.oracle(half_width=8.0, nodes=401)
    assert abs(lam - exact) / exact < 0.01, lam
    assert len(xs) == len(vs) == 401
    print("oracle lambda:", lam)

    again = lab.Solution.from_json(sol.to_json())
    assert again.ergodic_constant == sol.ergodic_constant
    assert abs(again.vbar([0.7]) - sol.vbar([0.7])) < 1e-12
    assert len(sol.zetabar([0.7])) == 1
    assert [a for a, _ in sol.schedule()] == [0.2, 0.1, 0.05, 0.025]

    try:
        sol.vbar([0.0, 1.0])
        raise AssertionError("dimension mismatch accepted")
    except ValueError:
        pass

    try:
        lab.Experiment.from_toml("[model]\nkind = 'nope'\n")
        raise AssertionError("bad config accepted")
    except ValueError as e:
        print("rejected config:", str(e).splitlines()[0])

    field = lab.heat_point_values([1.0, 0.0], [0.5])
    assert abs(field[0] - math.sqrt(2.0)) < 1e-12

    print("smoke test passed")


if __name__ == "__main__":
    main()
