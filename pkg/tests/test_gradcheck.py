import json


import occrep.autodiff as ad
from occrep import gradcheck

FAST = ["primitives", "footprint", "joint_occupancy", "erf_vs_stdlib", "cdf_vs_quadrature"]


def test_registry_contents():
    assert set(gradcheck.REGISTRY) == {
        "primitives", "footprint", "joint_occupancy", "loss_all_params_small", "loss_full_size_subset",
        "naive_all_params_small", "erf_vs_stdlib", "cdf_vs_quadrature",
    }
    assert gradcheck.REGISTRY["primitives"].tolerance == 1e-4
    assert gradcheck.REGISTRY["loss_all_params_small"].tolerance == 1e-3


def test_fast_checks_pass():
    report = gradcheck.run_suite(FAST)
    assert report["passed"], report
    for row in report["checks"]:
        assert row["max_error"] <= row["tolerance"]
    assert json.loads(gradcheck.report_json(report)) == report


def test_toy_sample_shape(toy):
    assert toy.graph.num_lanelets == 3 and toy.graph.num_vehicles == 2
    assert toy.labels.num_steps == 60


def test_erf_sign_flip_is_caught(monkeypatch):
    honest = ad._erf_grad
    monkeypatch.setattr(ad, "_erf_grad", lambda x: -honest(x))
    report = gradcheck.run_suite(["primitives", "footprint", "loss_all_params_small"])
    assert not report["passed"]
    assert all(not row["passed"] for row in report["checks"])


def test_crashing_check_fails(monkeypatch):
    def boom():
        raise RuntimeError("broken")

    monkeypatch.setitem(gradcheck.REGISTRY, "boom", gradcheck.Check("boom", 1.0, boom))
    report = gradcheck.run_suite(["boom"])
    assert not report["passed"] and "broken" in report["checks"][0]["error"]
