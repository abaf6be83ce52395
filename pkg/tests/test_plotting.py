import numpy as np
import pytest

from shapepose.evaluation import RecombinationGrid, profile_from_codes
from shapepose.plotting import emit_plots


def _results():
    g = np.random.default_rng(0)
    prof = profile_from_codes(g.normal(size=(20, 24)), g.normal(size=(20, 24)))
    prof2 = profile_from_codes(np.zeros((20, 24)), g.normal(size=(20, 24)))
    imgs = g.uniform(size=(3, 16, 16, 3))
    return {"profiles": {"vaesp_bottle": prof, "vae_bottle": prof2},
            "predictions": {"vaesp_bottle": {"input": imgs, "prediction": imgs, "target": imgs}},
            "grids": {"vaesp_bottle": RecombinationGrid(g.uniform(size=(3, 3, 16, 16, 3)))},
            "reach": {"vaesp_bottle": {"planner": g.uniform(size=10) * 0.5, "random": g.uniform(size=10)}}}


def test_one_violin_file_per_profile(tmp_path):
    written = emit_plots(_results(), tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert "violin_vaesp_bottle.svg" in names and "violin_vae_bottle.svg" in names
    assert len([n for n in names if n.startswith("violin_") and n.endswith(".svg")]) == 2
    assert {"predictions_vaesp_bottle.svg", "recombination_vaesp_bottle.png", "reach_vaesp_bottle.svg"} <= set(names)
    assert len(written) == len(names)


def test_empty_results_warn(tmp_path):
    with pytest.warns(UserWarning):
        assert emit_plots({}, tmp_path / "out") == []
    assert not (tmp_path / "out").exists()


def test_vector_output_is_byte_stable(tmp_path):
    emit_plots(_results(), tmp_path / "a")
    emit_plots(_results(), tmp_path / "b")
    for p in (tmp_path / "a").glob("*.svg"):
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()
