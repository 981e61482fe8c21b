"""End-to-end CLI tests on a tiny model and dataset."""

import numpy as np
import pytest

from se2vae.cli import main, run_checks
from se2vae.storage import load_dataset, load_model, read_embeddings

TINY_MODEL_KV = """
patch_size=16
n_orientations=4
latent_iso=2
latent_ori=2
latent_baseline=4
channels=2,2,2,2
baseline_channels=2,2,2,2
disc_channels=2,2,2,2
kernel_size=3
"""

TINY_TRAIN_KV = """
batch_size=4
max_steps=8
val_interval=4
val_batches=1
gamma=0.01
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Run generate -> train -> embed -> aggregate once, share the files."""
    root = tmp_path_factory.mktemp("cli")
    (root / "model.kv").write_text(TINY_MODEL_KV)
    (root / "train.kv").write_text(TINY_TRAIN_KV)
    assert main(["generate", "--out", str(root / "data"), "--bags", "45",
                 "--patches", "2", "--patch-size", "16", "--seed", "3"]) == 0
    manifest = str(root / "data" / "manifest.csv")
    assert main(["train", "--variant", "disentangled", "--data", manifest,
                 "--out", str(root / "model.ckpt"),
                 "--model-config", str(root / "model.kv"),
                 "--config", str(root / "train.kv")]) == 0
    assert main(["embed", "--checkpoint", str(root / "model.ckpt"),
                 "--data", manifest,
                 "--out", str(root / "emb.csv")]) == 0
    assert main(["aggregate", "--embeddings", str(root / "emb.csv"),
                 "--data", manifest,
                 "--out", str(root / "agg.csv")]) == 0
    return root


class TestPipeline:
    def test_generate_outputs(self, workspace):
        ds = load_dataset(workspace / "data" / "manifest.csv")
        assert len(ds) == 90
        assert ds.images.shape[-1] == 16

    def test_train_outputs(self, workspace):
        assert (workspace / "model.ckpt").exists()
        metrics = (workspace / "model.metrics.tsv").read_text().splitlines()
        assert metrics[0].startswith("step\t")
        assert len(metrics) >= 2
        cfg, store = load_model(workspace / "model.ckpt")
        assert cfg.variant == "disentangled"
        assert cfg.patch_size == 16

    def test_embed_row_and_column_count(self, workspace):
        ids, bags, iso, ori = read_embeddings(workspace / "emb.csv")
        assert len(ids) == 90
        assert iso.shape == (90, 2)
        assert ori.shape == (90, 2, 4)
        header = (workspace / "emb.csv").read_text().splitlines()[0]
        assert len(header.split(",")) == 2 + 2 + 2 * 4

    def test_aggregate_row_count(self, workspace):
        lines = (workspace / "agg.csv").read_text().splitlines()
        assert len(lines) == 1 + 45

    def test_eval_iso(self, workspace, capsys):
        code = main(["eval", "--representation", "iso",
                     "--aggregates", str(workspace / "agg.csv"),
                     "--repeats", "2"])
        assert code == 0
        out = capsys.readouterr().out
        lines = out.strip().splitlines()
        assert lines[0].startswith("representation\ttask")
        cells = lines[1].split("\t")
        assert cells[0] == "iso" and cells[1] == "grade"
        assert 0.0 <= float(cells[2]) <= 1.0

    def test_eval_ori_cyclic(self, workspace, capsys):
        code = main(["eval", "--representation", "ori",
                     "--aggregates", str(workspace / "agg.csv"),
                     "--repeats", "2"])
        assert code == 0
        assert "ori\t" in capsys.readouterr().out

    def test_eval_factors(self, workspace, capsys):
        manifest = str(workspace / "data" / "manifest.csv")
        code = main(["eval", "--representation", "factors",
                     "--data", manifest, "--repeats", "2",
                     "--out", str(workspace / "report.tsv")])
        assert code == 0
        report = (workspace / "report.tsv").read_text()
        assert report.startswith("representation\t")
        # ground-truth size statistics make the size-tercile task well
        # above chance; the middle tercile caps mAUC below 1.0 because a
        # linear score cannot rank "middle vs rest" on a 1-D feature
        mean = float(report.splitlines()[1].split("\t")[2])
        assert mean > 0.7

    def test_eval_combined(self, workspace, capsys):
        manifest = str(workspace / "data" / "manifest.csv")
        code = main(["eval", "--representation", "combined",
                     "--aggregates", str(workspace / "agg.csv"),
                     "--data", manifest, "--repeats", "2"])
        assert code == 0

    def test_traverse_modes(self, workspace):
        manifest = str(workspace / "data" / "manifest.csv")
        for mode, extra in (("ori-cycle", []),
                            ("iso-sweep", ["--coord", "1"]),
                            ("interpolate", ["--index2", "5",
                                             "--steps", "3"])):
            out = workspace / f"trav_{mode}.png"
            code = main(["traverse", "--checkpoint",
                         str(workspace / "model.ckpt"),
                         "--data", manifest, "--mode", mode,
                         "--out", str(out)] + extra)
            assert code == 0
            assert out.exists()


class TestErrors:
    def test_unknown_subcommand_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2

    def test_unknown_flag_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["generate", "--out", "x", "--bogus"])
        assert exc.value.code == 2

    def test_unknown_representation_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["eval", "--representation", "magic"])
        assert exc.value.code == 2

    def test_missing_data_file_exits_1(self, tmp_path, capsys):
        code = main(["train", "--variant", "baseline",
                     "--data", str(tmp_path / "nope.csv"),
                     "--out", str(tmp_path / "m.ckpt")])
        assert code == 1
        assert "error:" in capsys.readouterr().err

    def test_unknown_config_key_exits_1(self, tmp_path, capsys):
        bad = tmp_path / "syn.kv"
        bad.write_text("bogus_key=1\n")
        code = main(["generate", "--out", str(tmp_path / "d"),
                     "--config", str(bad)])
        assert code == 1
        assert "bogus_key" in capsys.readouterr().err

    def test_patch_size_mismatch_exits_1(self, workspace, tmp_path, capsys):
        manifest = str(workspace / "data" / "manifest.csv")
        code = main(["train", "--variant", "disentangled",
                     "--data", manifest,
                     "--out", str(tmp_path / "m.ckpt")])   # desk preset, 36px
        assert code == 1
        assert "16 px" in capsys.readouterr().err

    def test_eval_missing_inputs_exit_1(self, capsys):
        assert main(["eval", "--representation", "iso"]) == 1
        assert main(["eval", "--representation", "factors"]) == 1


class TestCheck:
    def test_check_passes_on_fresh_weights(self, capsys):
        assert main(["check", "--seed", "0"]) == 0
        out = capsys.readouterr().out
        assert out.count("PASS") == 4
        assert "FAIL" not in out

    def test_run_checks_structure(self):
        results = run_checks(seed=1)
        assert len(results) == 4
        assert all(ok for _, ok, _ in results)
