import numpy as np
import pytest

from causaldiffrec.cli import main
from causaldiffrec.data import load_split_file
from causaldiffrec.seeding import numpy_rng


def write_dataset(path, num_users=30, num_items=20, per_user=8, seed=0):
    rng = numpy_rng(seed, "cli_dataset")
    lines = []
    t = 0
    for u in range(num_users):
        items = rng.choice(num_items, size=per_user, replace=False)
        for i in items:
            lines.append(f"u{u}\ti{i}\t{t}")
            t += 1
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


TRAIN_ARGS = ["--set", "latent_dim=6", "--set", "diffusion_steps=4",
              "--set", "env_dim=3", "--set", "env_hidden_dim=6",
              "--set", "denoiser_hidden=8", "--set", "time_embed_dim=4",
              "--set", "candidate_cap=6", "--set", "edits_per_node=1",
              "--set", "batch_size=128", "--set", "patience=5"]


@pytest.fixture()
def prepared(tmp_path):
    data = write_dataset(tmp_path / "data.tsv")
    splits = tmp_path / "splits"
    assert main(["prepare", "--data", str(data), "--shift", "temporal",
                 "--out", str(splits), "--seed", "1"]) == 0
    return data, splits


class TestPrepare:
    def test_temporal_outputs(self, prepared, tmp_path):
        _, splits = prepared
        for name in ("train.tsv", "valid.tsv", "test.tsv", "id_map.tsv",
                     "audit.txt"):
            assert (splits / name).exists()
        head = "\n".join((splits / "train.tsv").read_text().splitlines()[:5])
        assert "config_hash=" in head
        train = load_split_file(splits / "train.tsv")
        test = load_split_file(splits / "test.tsv")
        total = 30 * 8
        assert abs(len(train) - 0.6 * total) <= 30  # +-1 per user
        assert abs(len(test) - 0.2 * total) <= 30

    def test_popularity_deterministic_bytes(self, tmp_path):
        data = write_dataset(tmp_path / "data.tsv")
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert main(["prepare", "--data", str(data), "--shift",
                         "popularity", "--out", str(out), "--seed", "7"]) == 0
            outs.append(out)
        for fname in ("train.tsv", "valid.tsv", "test.tsv", "audit.txt"):
            assert (outs[0] / fname).read_bytes() == (outs[1] / fname).read_bytes()

    def test_missing_file_names_path(self, tmp_path, capsys):
        code = main(["prepare", "--data", str(tmp_path / "nope.tsv"),
                     "--shift", "temporal", "--out", str(tmp_path / "o")])
        assert code != 0
        assert "nope.tsv" in capsys.readouterr().err

    def test_unknown_shift_usage_error(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as err:
            main(["prepare", "--data", "x", "--shift", "sideways",
                  "--out", str(tmp_path)])
        assert err.value.code == 2
        stderr = capsys.readouterr().err
        for kind in ("temporal", "exposure", "popularity", "random_iid"):
            assert kind in stderr

    def test_exposure_requires_small(self, tmp_path, capsys):
        data = write_dataset(tmp_path / "data.tsv")
        code = main(["prepare", "--data", str(data), "--shift", "exposure",
                     "--out", str(tmp_path / "o")])
        assert code != 0
        assert "--small" in capsys.readouterr().err

    def test_exposure_split_flow(self, tmp_path):
        data = write_dataset(tmp_path / "data.tsv")
        small = tmp_path / "small.tsv"
        # every 6th interaction: partial exposure of most users
        lines = data.read_text().splitlines()[::6]
        small.write_text("\n".join(lines) + "\n", encoding="utf-8")
        assert main(["prepare", "--data", str(data), "--shift", "exposure",
                     "--small", str(small), "--out", str(tmp_path / "o"),
                     "--seed", "2"]) == 0
        test = load_split_file(tmp_path / "o" / "test.tsv")
        assert len(test) > 0


class TestTrainEval:
    def test_train_eval_round_trip(self, prepared, tmp_path):
        _, splits = prepared
        run = tmp_path / "run"
        assert main(["train", "--splits", str(splits), "--out", str(run),
                     "--epochs", "1", "--seed", "3"] + TRAIN_ARGS) == 0
        assert (run / "checkpoint.pt").exists()
        log = (run / "train_log.txt").read_text()
        assert "config_hash=" in log and "epoch=0" in log

        out = tmp_path / "eval"
        assert main(["eval", "--checkpoint", str(run / "checkpoint.pt"),
                     "--splits", str(splits), "--out", str(out),
                     "--topk", "5,10"]) == 0
        report = (out / "report_splits.txt").read_text()
        for key in ("recall@5", "recall@10", "ndcg@5", "ndcg@10"):
            assert key in report

    def test_zero_epochs_checkpoint_of_init(self, prepared, tmp_path):
        _, splits = prepared
        run = tmp_path / "run0"
        assert main(["train", "--splits", str(splits), "--out", str(run),
                     "--epochs", "0", "--seed", "3"] + TRAIN_ARGS) == 0
        assert (run / "checkpoint.pt").exists()

    def test_same_seed_identical_checkpoints(self, prepared, tmp_path):
        _, splits = prepared
        blobs = []
        for name in ("r1", "r2"):
            run = tmp_path / name
            assert main(["train", "--splits", str(splits), "--out", str(run),
                         "--epochs", "1", "--seed", "5"] + TRAIN_ARGS) == 0
            blobs.append((run / "checkpoint.pt").read_bytes())
            assert (run / "train_log.txt").exists()
        assert blobs[0] == blobs[1]

    def test_ablate_flag_runs(self, prepared, tmp_path):
        _, splits = prepared
        run = tmp_path / "ablate"
        assert main(["train", "--splits", str(splits), "--out", str(run),
                     "--epochs", "1", "--seed", "3", "--ablate", "no_generator",
                     "--set", "n_envs=1"] + TRAIN_ARGS) == 0
        log = (run / "train_log.txt").read_text()
        assert "generator=0 " in log

    def test_compare_emits_degradation_summary(self, prepared, tmp_path):
        data, splits = prepared
        iid = tmp_path / "iid"
        assert main(["prepare", "--data", str(data), "--shift", "random_iid",
                     "--out", str(iid), "--seed", "1"]) == 0
        run = tmp_path / "run"
        assert main(["train", "--splits", str(splits), "--out", str(run),
                     "--epochs", "1", "--seed", "3"] + TRAIN_ARGS) == 0
        out = tmp_path / "cmp"
        assert main(["eval", "--checkpoint", str(run / "checkpoint.pt"),
                     "--splits", str(iid), "--compare", str(splits),
                     "--out", str(out)]) == 0
        text = (out / "comparison.txt").read_text()
        assert "drop_average=" in text

    def test_corrupted_checkpoint_exit_names_file(self, prepared, tmp_path, capsys):
        _, splits = prepared
        bad = tmp_path / "bad.pt"
        bad.write_bytes(b"garbage")
        code = main(["eval", "--checkpoint", str(bad), "--splits", str(splits),
                     "--out", str(tmp_path / "o")])
        assert code != 0
        assert "bad.pt" in capsys.readouterr().err

    def test_universe_mismatch_refused_without_force(self, prepared, tmp_path,
                                                     capsys):
        _, splits = prepared
        other_data = write_dataset(tmp_path / "other.tsv", num_users=12,
                                   num_items=9, seed=9)
        other = tmp_path / "other_splits"
        assert main(["prepare", "--data", str(other_data), "--shift",
                     "temporal", "--out", str(other), "--seed", "1"]) == 0
        run = tmp_path / "run"
        assert main(["train", "--splits", str(splits), "--out", str(run),
                     "--epochs", "1", "--seed", "3"] + TRAIN_ARGS) == 0
        code = main(["eval", "--checkpoint", str(run / "checkpoint.pt"),
                     "--splits", str(other), "--out", str(tmp_path / "o")])
        assert code != 0
        assert "--force" in capsys.readouterr().err

    def test_export_embeddings(self, prepared, tmp_path):
        _, splits = prepared
        run = tmp_path / "run"
        assert main(["train", "--splits", str(splits), "--out", str(run),
                     "--epochs", "1", "--seed", "3"] + TRAIN_ARGS) == 0
        emb_path = tmp_path / "items.tsv"
        assert main(["eval", "--checkpoint", str(run / "checkpoint.pt"),
                     "--splits", str(splits), "--out", str(tmp_path / "o"),
                     "--export-embeddings", str(emb_path)]) == 0
        lines = emb_path.read_text().splitlines()
        assert len(lines) == 20
        assert any("\tpopular\t" in line for line in lines)


class TestGradcheckCommand:
    def test_exit_zero_and_report(self, tmp_path, capsys):
        out = tmp_path / "grad.txt"
        assert main(["gradcheck", "--seed", "0", "--out", str(out)]) == 0
        assert "passed=yes" in out.read_text()


class TestConfigFile:
    def test_config_file_with_sections_and_overrides(self, prepared, tmp_path):
        _, splits = prepared
        cfg = tmp_path / "run.cfg"
        cfg.write_text("[training]\nlatent_dim = 6\ndiffusion_steps = 4\n"
                       "env_dim = 3\nenv_hidden_dim = 6\ndenoiser_hidden = 8\n"
                       "time_embed_dim = 4\ncandidate_cap = 6\n"
                       "edits_per_node = 1\nbatch_size = 128\n"
                       "[objective]\nlambda1 = 0.05\n", encoding="utf-8")
        run = tmp_path / "run"
        assert main(["train", "--splits", str(splits), "--out", str(run),
                     "--config", str(cfg), "--epochs", "1",
                     "--seed", "4"]) == 0

    def test_unknown_config_key_rejected(self, prepared, tmp_path, capsys):
        _, splits = prepared
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("latent_dmi = 6\n", encoding="utf-8")
        code = main(["train", "--splits", str(splits),
                     "--out", str(tmp_path / "r"), "--config", str(cfg)])
        assert code != 0
        assert "latent_dmi" in capsys.readouterr().err
