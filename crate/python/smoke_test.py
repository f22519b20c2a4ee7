"""Smoke test for the hybridcat extension module.

Build and install first:  pip install -e crates/py --no-build-isolation
"""
import math

import hybridcat as hc


def main():
    assert "hopper" in hc.gallery_names()

    e = hc.Expr("sin(x0)*x1 + x1^2", 2)
    assert abs(e.eval([0.5, 2.0]) - (math.sin(0.5) * 2 + 4)) < 1e-12
    gx, gy = e.gradient([0.5, 2.0])
    assert abs(gx - math.cos(0.5) * 2) < 1e-12 and abs(gy - (math.sin(0.5) + 4)) < 1e-12
    assert hc.Expr(str(e), 2) == e

    hop = hc.HybridSystem.gallery("hopper")
    assert hop.modes == ["v"] and hop.dim("v") == 2
    tr = hop.simulate("v", [-1.0, 0.5], horizon=60.0, max_jumps=1000)
    mode, x = tr.final_point
    assert abs(math.hypot(*x) - 2.0) < 1e-3, x
    assert len(tr.jump_times) > 5

    rb = hc.HybridSystem.gallery("rocking_block", alpha=0.3, r=0.5)
    assert rb.params["r"] == 0.5
    assert rb.validate(samples=200)["ok"]
    back = hc.HybridSystem.from_json(rb.to_json())
    assert back.modes == rb.modes

    for name, m in hc.hopper_maps().items():
        assert m.validate(samples=100)["ok"], name

    circle = hc.HybridSystem.gallery("circle_flow")
    line = hc.HybridSystem.gallery("line")
    p, pi1, pi2 = hc.product(line, circle)
    assert p.dim("(v,c)") == 3 and pi2.validate(samples=100)["ok"]

    sliced, sub = hc.slice_mode(circle, "c", "x0")
    assert len(sliced.modes) == 2 and sub.validate(samples=100)["ok"]
    orig = circle.simulate("c", [1.0, 0.0], horizon=20.0)
    lifted = hc.pullback_sliced(circle, "c", "x0", orig)
    assert len(lifted) > 1
    assert sub.push(lifted).fundamentalize().distance(orig) <= 1e-8

    hk = hc.sequential_example()
    assert hk.chain_search("v", [1.0], ["z"], eps=0.05, t=1.0) is not None
    assert hk.chain_search("v", [1.0], ["z"], eps=0.0, t=1.0) is None

    nd = hc.HybridSystem.gallery("nondeterministic_subdivision")
    assert not nd.check_determinism(samples=300)["ok"]

    smooth = hc.HybridSystem.gallery("hopper_smooth")
    rep = smooth.check_trapping({"v": "min(x0^2 + x1^2 - 0.25, 16 - x0^2 - x1^2)"}, samples=100, horizon=30.0, t_bound=15.0)
    assert rep["ok"] and rep["worst_interior_margin"] > 0

    try:
        hc.Expr("x0 +", 1)
    except ValueError:
        pass
    else:
        raise AssertionError("parse error not raised")

    print("python smoke test passed")


if __name__ == "__main__":
    main()
