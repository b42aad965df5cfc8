import numpy as np
import pytest

import pipsim


def test_uniform_span_matches_threshold_profile():
    for n in (1, 2, 3, 10, 37):
        uniform = np.full(n, 1.0 / n)
        r = pipsim.span_weights(uniform, uniform, eps=0.0)
        assert r.shape == (n,)
        assert np.allclose(r, pipsim.threshold_profile(n), atol=1e-12)
        assert r.sum() == pytest.approx(1.0)


def test_delta_span_is_uniform_between_endpoints():
    start = np.zeros(8)
    end = np.zeros(8)
    start[2] = 1.0
    end[5] = 1.0
    r = pipsim.span_weights(start, end)
    assert np.allclose(r[2:6], 0.25, atol=1e-7)
    assert np.allclose(r[:2], 0.0) and np.allclose(r[6:], 0.0)


def test_span_weights_rejects_mismatched_lengths():
    with pytest.raises(ValueError):
        pipsim.span_weights(np.ones(3), np.ones(4))


def test_salient_frames_pick_the_peak():
    r = np.array([0.05, 0.05, 0.8, 0.05, 0.05])
    assert pipsim.salient_frames(r) == [2]


def test_psnr_cap_and_value():
    a = np.zeros((3, 4, 4))
    assert pipsim.psnr(a, a) == pytest.approx(100.0)
    assert pipsim.psnr(a, np.full_like(a, 0.5)) == pytest.approx(10 * np.log10(4.0))


def test_episode_is_deterministic():
    first = pipsim.generate_episode("contact", 3)
    second = pipsim.generate_episode("contact", 3)
    assert first["task"] == "contact"
    assert first["frames"].shape[1:] == (3, 32, 32)
    assert first["frames"].min() >= 0.0 and first["frames"].max() <= 1.0
    assert np.array_equal(first["frames"], second["frames"])
    assert first["labels"] == second["labels"]
    assert set(first["labels"]) <= {0, 1}
    assert len(first["labels"]) == len(first["queryable"])


def test_unknown_task_raises():
    with pytest.raises(Exception):
        pipsim.generate_episode("juggling", 1)


def test_cli_round_trip(tmp_path):
    out = tmp_path / "ds"
    code, stdout, err = pipsim.run_cli(["gen", "--task", "stability", "--n", "5", "--seed", "1", "--out", str(out)])
    assert code == pipsim.EXIT_OK, err
    assert (out / "manifest.json").exists()
    assert "train" in stdout
    code, _, err = pipsim.run_cli(["gen", "--n", "5", "--out", str(out)])
    assert code == pipsim.EXIT_USAGE
    assert "--force" in err
    code, _, _ = pipsim.run_cli(["nonsense"])
    assert code == pipsim.EXIT_USAGE
