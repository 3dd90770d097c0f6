import csv
import json

import numpy as np
import pytest

from nessst import cli, homsample, nessnet, synth
from nessst.imgcore import save_pgm


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture
def fast_cfg(tmp_path):
    p = tmp_path / "fast.json"
    p.write_text(json.dumps({"stability": {"m": 20}, "n": 40, "train": {"epochs": 3, "learning_rate": 1e-3}}))
    return p


@pytest.fixture
def img_dir(tmp_path):
    d = tmp_path / "imgs"
    d.mkdir()
    for i in range(3):
        save_pgm(synth.textured((64, 64), seed=i), d / f"t{i}.pgm")
    return d


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestDetect:
    def test_constant_empty(self, tmp_path):
        save_pgm(np.full((32, 32), 0.5), tmp_path / "c.pgm")
        assert run("detect", tmp_path / "c.pgm", "--mode", "ST", "--out", tmp_path / "o.csv") == 0
        assert (tmp_path / "o.csv").read_text() == "x,y,s,lambda,r\n"

    def test_checkerboard_ss_st(self, tmp_path, fast_cfg):
        y, x = np.mgrid[0:64, 0:64]
        board = synth.render(lambda x, y: np.where(((x + 0.5) // 8 + (y + 0.5) // 8) % 2 == 0, 0.8, 0.2), (64, 64))
        save_pgm(board, tmp_path / "b.pgm")
        out = tmp_path / "b.csv"
        assert run("detect", tmp_path / "b.pgm", "--mode", "SS-ST", "--n", 16, "--config", fast_cfg, "--out", out) == 0
        rows = read_csv(out)
        assert rows[0] == ["x", "y", "s", "lambda", "r"]
        assert 1 <= len(rows) - 1 <= 16
        assert all(r[3] != "" for r in rows[1:])

    def test_neural_without_model(self, tmp_path, capsys):
        save_pgm(np.zeros((32, 32)), tmp_path / "c.pgm")
        assert run("detect", tmp_path / "c.pgm", "--mode", "NeSS-ST") == 1
        assert "requires --model" in capsys.readouterr().err

    def test_bad_mode(self, tmp_path):
        save_pgm(np.zeros((32, 32)), tmp_path / "c.pgm")
        with pytest.raises(SystemExit) as exc:
            run("detect", tmp_path / "c.pgm", "--mode", "FAST")
        assert exc.value.code == 1

    def test_missing_file(self, tmp_path, capsys):
        assert run("detect", tmp_path / "none.pgm") == 2
        assert "none.pgm" in capsys.readouterr().err

    def test_score_map_and_stdout(self, tmp_path, capsys):
        save_pgm(synth.textured((48, 48), 1), tmp_path / "t.pgm")
        assert run("detect", tmp_path / "t.pgm", "--n", 5, "--score-map", tmp_path / "s.pgm") == 0
        out = capsys.readouterr()
        assert out.out.startswith("x,y,s,lambda,r\n") and len(out.out.splitlines()) == 6
        assert "seed 0" in out.err and "5 keypoints" in out.err
        assert (tmp_path / "s.pgm").read_bytes().startswith(b"P5\n48 48\n255\n")

    def test_bad_config(self, tmp_path):
        cfgp = tmp_path / "bad.json"
        cfgp.write_text(json.dumps({"stability": {"tshi": 0.1}}))
        save_pgm(np.zeros((32, 32)), tmp_path / "c.pgm")
        assert run("detect", tmp_path / "c.pgm", "--config", cfgp) == 1


class TestGenGT:
    def test_counts_match_detect(self, tmp_path, img_dir, fast_cfg):
        out = tmp_path / "gt.csv"
        assert run("gen-gt", img_dir, "--config", fast_cfg, "--out", out) == 0
        rows = read_csv(out)
        assert rows[0] == ["image", "x", "y", "s", "lambda", "r", "included", "row", "col"]
        for i in range(3):
            det = tmp_path / f"d{i}.csv"
            # n large enough to return every extremum
            run("detect", img_dir / f"t{i}.pgm", "--n", 100000, "--out", det)
            n_det = len(read_csv(det)) - 1
            n_gt = sum(1 for r in rows[1:] if r[0] == f"t{i}.pgm")
            assert n_gt == min(n_det, 40)

    def test_constant_image(self, tmp_path):
        d = tmp_path / "c"
        d.mkdir()
        save_pgm(np.full((32, 32), 0.5), d / "c.pgm")
        assert run("gen-gt", d, "--out", tmp_path / "gt.csv") == 0
        assert len(read_csv(tmp_path / "gt.csv")) == 1

    def test_empty_dir(self, tmp_path):
        (tmp_path / "e").mkdir()
        assert run("gen-gt", tmp_path / "e", "--out", tmp_path / "gt.csv") == 1

    def test_seed_override(self, tmp_path, img_dir, fast_cfg):
        run("gen-gt", img_dir, "--config", fast_cfg, "--seed", 1, "--out", tmp_path / "a.csv")
        run("gen-gt", img_dir, "--config", fast_cfg, "--seed", 2, "--out", tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() != (tmp_path / "b.csv").read_bytes()

    def test_threads_same_output(self, tmp_path, img_dir, fast_cfg):
        run("gen-gt", img_dir, "--config", fast_cfg, "--out", tmp_path / "a.csv")
        run("gen-gt", img_dir, "--config", fast_cfg, "--threads", 3, "--out", tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


class TestTrain:
    def test_from_images_and_csv(self, tmp_path, img_dir, fast_cfg):
        model = tmp_path / "m.json"
        assert run("train", img_dir, "--config", fast_cfg, "--out", model) == 0
        params, target, tc = nessnet.model_from_json(model.read_text())
        assert target == "lambda" and tc["epochs"] == 3
        loss = read_csv(str(model) + ".loss.csv")
        assert loss[0] == ["epoch", "loss"] and len(loss) == 5

        gt = tmp_path / "gt.csv"
        run("gen-gt", img_dir, "--config", fast_cfg, "--out", gt)
        model2 = tmp_path / "m2.json"
        assert run("train", gt, "--image-dir", img_dir, "--config", fast_cfg, "--out", model2,
                   "--loss-out", tmp_path / "l2.csv") == 0
        # same samples in the same order; targets differ only by CSV rounding (9 digits)
        params2, _, _ = nessnet.model_from_json(model2.read_text())
        for k in params:
            np.testing.assert_allclose(params2[k], params[k], rtol=1e-5, atol=1e-7)

    def test_zero_lr_flat(self, tmp_path, img_dir):
        cfgp = tmp_path / "z.json"
        cfgp.write_text(json.dumps({"stability": {"m": 10}, "n": 20, "train": {"epochs": 2, "learning_rate": 0.0}}))
        run("train", img_dir, "--config", cfgp, "--out", tmp_path / "m.json", "--loss-out", tmp_path / "l.csv")
        vals = {r[1] for r in read_csv(tmp_path / "l.csv")[1:]}
        assert len(vals) == 1

    def test_degenerate(self, tmp_path):
        d = tmp_path / "c"
        d.mkdir()
        save_pgm(synth.textured((48, 48), 0) * 0.02, d / "faint.pgm")
        cfgp = tmp_path / "hi.json"
        cfgp.write_text(json.dumps({"stability": {"m": 5, "t_shi": 0.5}, "train": {"t_shi": 0.5, "epochs": 1}}))
        assert run("train", d, "--config", cfgp, "--out", tmp_path / "m.json") == 3

    def test_ness_detect_with_model(self, tmp_path, img_dir, fast_cfg):
        model = tmp_path / "m.json"
        run("train", img_dir, "--config", fast_cfg, "--out", model)
        out = tmp_path / "k.csv"
        assert run("detect", img_dir / "t0.pgm", "--mode", "NeSS-ST", "--model", model, "--n", 10, "--out", out) == 0
        assert len(read_csv(out)) == 11


class TestEval:
    def test_report_schema(self, tmp_path, img_dir, fast_cfg):
        out = tmp_path / "r.json"
        assert run("eval", img_dir, "--mode", "ST,SS-ST", "--config", fast_cfg, "--out", out) == 0
        rep = json.loads(out.read_text())
        assert [r["mode"] for r in rep["runs"]] == ["ST", "SS-ST"]
        for r in rep["runs"]:
            assert len(r["records"]) == 3
            rec = r["records"][0]
            for k in ("pair_id", "n_kp_a", "n_kp_b", "repeatability@1px", "repeatability@3px",
                      "repeatability@5px", "corner_error_px", "matched_count", "inlier_count"):
                assert k in rec
            agg = r["aggregate"]
            assert agg["accuracy_curve"]["thresholds"] == [1.0, 2.0, 3.0, 4.0, 5.0]
            assert len(agg["accuracy_curve"]["accuracy"]) == 5
            assert 0.0 <= agg["mAA"] <= 1.0

    def test_identity_pairs(self, tmp_path, img_dir):
        cfgp = tmp_path / "id.json"
        cfgp.write_text(json.dumps({"n": 50, "eval": {"jitter": 0.0}}))
        out = tmp_path / "r.json"
        assert run("eval", img_dir, "--config", cfgp, "--out", out) == 0
        for rec in json.loads(out.read_text())["runs"][0]["records"]:
            assert rec["repeatability@3px"] == 1.0

    def test_unknown_mode(self, tmp_path, img_dir):
        assert run("eval", img_dir, "--mode", "ST,XX", "--out", tmp_path / "r.json") == 1


class TestSampleH:
    def test_identity(self, tmp_path):
        cfgp = tmp_path / "j.json"
        cfgp.write_text(json.dumps({"stability": {"jitter": 0.0}}))
        out = tmp_path / "h.txt"
        assert run("sample-h", "--count", 3, "--config", cfgp, "--out", out) == 0
        hs = homsample.parse_homographies(out.read_text())
        np.testing.assert_array_equal(hs, np.tile(np.eye(3), (3, 1, 1)))

    def test_constraint_and_reproducible(self, tmp_path):
        run("sample-h", "--count", 50, "--seed", 4, "--out", tmp_path / "a.txt")
        run("sample-h", "--count", 50, "--seed", 4, "--out", tmp_path / "b.txt")
        assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
        cfg = homsample.HomographySamplerConfig()
        hs = homsample.parse_homographies((tmp_path / "a.txt").read_text())
        warped = homsample.apply_batch(hs, np.broadcast_to(cfg.corners, (50, 4, 2)))
        assert homsample.corners_admissible(cfg, warped).all()


def test_make_fixtures(tmp_path):
    assert run("make-fixtures", tmp_path / "fx", "--kind", "patterns", "--count", 5, "--size", 48) == 0
    assert len(list((tmp_path / "fx").glob("*.pgm"))) == 5


def test_global_flags_before_subcommand(tmp_path, capsys):
    assert run("--seed", 9, "sample-h", "--count", 1, "--out", tmp_path / "h.txt") == 0
    assert "seed 9" in capsys.readouterr().err
