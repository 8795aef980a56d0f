import json
import shutil

import jsonschema
import numpy as np
import pytest

from ticketlab.checkpoint import load_checkpoint, save_checkpoint
from ticketlab.cli import EVAL_SCHEMA, main, read_report_csv
from ticketlab.config import ExperimentConfig, desk_config
from ticketlab.pruning import SparsityMask, format_compression

from conftest import toy_config


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if code == 0 else json.loads(err))


def write_cfg(tmp_path, cfg, name="exp.json"):
    path = tmp_path / name
    cfg.dump(path)
    return path


@pytest.fixture
def toy_env(tmp_path, capsys):
    cfg = toy_config(max_rounds=2, root=str(tmp_path / "data"), run_dir=str(tmp_path / "run"))
    path = write_cfg(tmp_path, cfg)
    code, _ = run(capsys, "datagen", "--config", path)
    assert code == 0
    return cfg, path


def read_tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestDatagen:
    def test_default_recipe_counts(self, tmp_path, capsys):
        cfg = ExperimentConfig()
        cfg.data.root = str(tmp_path / "d")
        code, out = run(capsys, "datagen", "--config", write_cfg(tmp_path, cfg))
        assert code == 0
        assert out["counts"] == {t: {"train": 180, "val": 20, "test": 32}
                                 for t in ("derain", "dehaze", "denoise")}
        for t in ("derain", "dehaze", "denoise"):
            n_train = len(list((tmp_path / "d" / t / "train").glob("*_degraded.png")))
            n_val = len(list((tmp_path / "d" / t / "val").glob("*_degraded.png")))
            assert n_train + n_val == 200
            assert len(list((tmp_path / "d" / t / "test").glob("*_clean.png"))) == 32
        noise = json.loads((tmp_path / "d" / "denoise" / "manifest.json").read_text())
        train = sorted((e for e in noise if e["split"] != "test"), key=lambda e: e["source"])
        assert [e["spec"]["sigma"] for e in train[:6]] == [15, 25, 50, 15, 25, 50]
        combined = json.loads((tmp_path / "d" / "all" / "manifest.json").read_text())
        assert len(combined["train"]) == 3 * 180

    def test_manifests_reproducible(self, tmp_path, capsys):
        manifests = []
        for k in range(2):
            cfg = toy_config(root=str(tmp_path / f"d{k}"))
            assert run(capsys, "datagen", "--config", write_cfg(tmp_path, cfg, f"c{k}.json"))[0] == 0
            manifests.append((tmp_path / f"d{k}" / "denoise" / "manifest.json").read_bytes())
        assert manifests[0] == manifests[1]

    def test_refuses_non_empty_without_force(self, toy_env, capsys):
        _, path = toy_env
        code, err = run(capsys, "datagen", "--config", path)
        assert code != 0 and err["error"] == "CLIError" and "--force" in err["message"]
        assert run(capsys, "datagen", "--config", path, "--force")[0] == 0


class TestRuns:
    def test_lth_report_and_resume(self, toy_env, tmp_path, capsys):
        cfg, path = toy_env
        code, out = run(capsys, "lth", "--config", path)
        assert code == 0 and out["rounds_executed"] == 2
        run_dir = tmp_path / "run"
        ck = load_checkpoint(run_dir / "round_002", cfg.digest())
        assert ck.round == 2 and len(ck.theta0) == len(ck.theta)
        for n in ck.mask:
            assert not ck.theta[n][~ck.mask[n]].any()
        logs = [json.loads(line) for line in (run_dir / "log.jsonl").read_text().splitlines()]
        assert {r["config_digest"] for r in logs} == {cfg.digest()}
        assert len(logs) == 3 * cfg.train.epochs

        # report
        code, rep = run(capsys, "report", "--run-dir", run_dir)
        assert code == 0 and rep["rows"] == 3 and rep["complete"]
        rows = read_report_csv(run_dir / "report.csv")
        twin = json.loads((run_dir / "report.json").read_text())["rows"]
        assert rows == twin
        counts = [r["surviving_params"] for r in rows]
        assert all(a > b for a, b in zip(counts, counts[1:]))
        assert [r["round"] for r in rows] == [0, 1, 2]

        # interrupted after round 1: round 2 artifacts gone, log holds a partial round 2
        before = read_tree(run_dir)
        shutil.rmtree(run_dir / "round_002")
        (run_dir / "status.json").unlink()
        for name in ("report.csv", "report.json"):
            (run_dir / name).unlink()
        log_lines = (run_dir / "log.jsonl").read_text().splitlines()
        (run_dir / "log.jsonl").write_text("\n".join(log_lines[:-1]) + "\n")
        rounds = (run_dir / "rounds.jsonl").read_text().splitlines()
        (run_dir / "rounds.jsonl").write_text("\n".join(rounds[:2]) + "\n")
        code, _ = run(capsys, "lth", "--config", path, "--resume")
        assert code == 0
        after = read_tree(run_dir)
        before = {k: v for k, v in before.items() if not k.startswith("report.")}
        assert after == before

        # a fresh run into the same dir needs --force
        code, err = run(capsys, "lth", "--config", path)
        assert code != 0 and "--force" in err["message"]

    def test_train_then_oneshot_and_eval(self, toy_env, tmp_path, capsys):
        cfg, path = toy_env
        code, out = run(capsys, "train", "--config", path)
        assert code == 0 and out["rounds_executed"] == 0
        code, rand = run(capsys, "oneshot", "--config", path, "--kind", "random", "--fraction", 0.7)
        assert code == 0
        jsonschema.validate(rand, EVAL_SCHEMA)
        dense = load_checkpoint(tmp_path / "run" / "round_000", cfg.digest())
        total = dense.theta.prunable_count()
        assert rand["surviving_prunable"] == total - int(np.floor(0.7 * total))
        code, mag = run(capsys, "oneshot", "--config", path, "--kind", "magnitude", "--fraction", 0.3)
        assert code == 0
        jsonschema.validate(mag, EVAL_SCHEMA)
        assert run(capsys, "oneshot", "--config", path, "--kind", "random", "--fraction", 0.3)[0] == 0
        m_mag = load_checkpoint(tmp_path / "run" / "oneshot_magnitude_0.3").mask
        m_rnd = load_checkpoint(tmp_path / "run" / "oneshot_random_0.3").mask
        assert m_mag.survivors() == m_rnd.survivors() and not m_mag.equals(m_rnd)
        saved = json.loads((tmp_path / "run" / "oneshot_random_0.7" / "eval.json").read_text())
        assert saved == rand

        code, ev = run(capsys, "eval", "--config", path, "--checkpoint", tmp_path / "run" / "round_000")
        assert code == 0 and ev["kind"] == "checkpoint" and ev["compression"] == "x1.00"
        jsonschema.validate(ev, EVAL_SCHEMA)

    def test_oneshot_needs_dense_checkpoint(self, toy_env, capsys):
        _, path = toy_env
        code, err = run(capsys, "oneshot", "--config", path)
        assert code != 0 and "train" in err["message"]

    def test_eval_identity_checkpoint_on_clean_pairs(self, toy_env, tmp_path, capsys):
        cfg, path = toy_env
        from ticketlab.data import save_png
        from ticketlab.model import init_params
        from ticketlab.train import RunCheckpoint

        net = init_params(cfg.model, 0)
        net.params["output.weight"] = np.zeros_like(net.params["output.weight"])
        save_checkpoint(tmp_path / "ident", RunCheckpoint(net.params, net.params, SparsityMask.ones(net.params),
                                                          0, {}, cfg.digest()))
        pairs = tmp_path / "pairs"
        pairs.mkdir()
        img = np.random.default_rng(0).uniform(size=(16, 16, 3))
        save_png(pairs / "x_clean.png", img)
        save_png(pairs / "x_degraded.png", img)
        code, ev = run(capsys, "eval", "--config", path, "--checkpoint", tmp_path / "ident", "--data", pairs)
        assert code == 0 and ev["ssim"] == 1.0 and ev["psnr"] == "inf"

    def test_eval_digest_mismatch(self, toy_env, tmp_path, capsys):
        cfg, path = toy_env
        assert run(capsys, "train", "--config", path)[0] == 0
        other = write_cfg(tmp_path, toy_config(seed=5, root=cfg.data.root, run_dir=cfg.report.run_dir), "o.json")
        code, err = run(capsys, "eval", "--config", other, "--checkpoint", tmp_path / "run" / "round_000")
        assert code != 0 and err["error"] == "DigestMismatch"
        code, _ = run(capsys, "eval", "--config", other, "--checkpoint", tmp_path / "run" / "round_000",
                      "--override-digest")
        assert code == 0


def test_compression_accounting_identity():
    # 90% of the prunable share r removed: dense/sparse = 1 / (1 - 0.9 r)
    total, prunable = 144900, 139352
    sparse = total - prunable + round(prunable * 0.1)
    r = prunable / total
    assert format_compression(total, sparse) == f"x{1 / (1 - 0.9 * r):.2f}"
    assert format_compression(35.6e6, 4.7e6) == "x7.57"


def test_describe(capsys):
    code, out = run(capsys, "describe")
    assert code == 0 and out["total_params"] == 144900
    assert sum(1 for layer in out["layers"] if layer["output_layer"]) == 1


def test_report_missing_run(tmp_path, capsys):
    code, err = run(capsys, "report", "--run-dir", tmp_path)
    assert code != 0 and set(err) == {"error", "message"}


def test_desk_config_digest_ignores_paths():
    a, b = desk_config(), desk_config()
    b.data.root, b.report.run_dir = "elsewhere", "other"
    assert a.digest() == b.digest() and a.digest() != desk_config(41).digest()
