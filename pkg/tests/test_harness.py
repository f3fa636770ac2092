import csv
import io
import math

import numpy as np
import pytest

from mmfuse.ablation import COLUMNS, AblationReport, AblationRow, ablate
from mmfuse.cli import main
from mmfuse.config import RunConfig, expand_grid, load_grid, load_run_config, save_run_config
from mmfuse.data import puzzle_split, synth_puzzles
from mmfuse.errors import ConfigError
from mmfuse.model import HeadKind, ModelConfig
from mmfuse.train import TrainConfig

TINY = ModelConfig(vision="tiny", text="tiny")
QUICK = TrainConfig(learning_rate=1e-3, epochs=1, batch_size=8)

GRID_INI = """\
[model]
vision = tiny
text = tiny

[train]
epochs = 1
batch_size = 8
learning_rate = 0.001

[data]
split_seed = 0

[grid]
align = T_to_I, I_to_T
pool = BERT, Attn-pool
head = classification, matching
"""


class TestRunConfig:
    def test_round_trip(self, tmp_path):
        run = RunConfig(TINY.with_(align="I_to_T", pool="BERT", n_blocks=2), QUICK, split_seed=4)
        save_run_config(run, tmp_path / "run.ini")
        assert load_run_config(tmp_path / "run.ini") == run

    def test_model_dict_round_trip(self):
        cfg = ModelConfig(head="matching", fusion_ffn=False, precision="f64")
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key(self, tmp_path):
        (tmp_path / "bad.ini").write_text("[model]\nwidth = 3\n")
        with pytest.raises(ConfigError, match="width"):
            load_run_config(tmp_path / "bad.ini")

    def test_unknown_section(self, tmp_path):
        (tmp_path / "bad.ini").write_text("[optimizer]\nlr = 3\n")
        with pytest.raises(ConfigError):
            load_run_config(tmp_path / "bad.ini")

    def test_bad_enum(self, tmp_path):
        (tmp_path / "bad.ini").write_text("[model]\nalign = up\n")
        with pytest.raises(ConfigError):
            load_run_config(tmp_path / "bad.ini")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(tmp_path / "nope.ini")


class TestGrid:
    def test_two_by_two_gives_four(self):
        grid = expand_grid(TINY, {"align": ["T_to_I", "I_to_T"], "pool": ["BERT", "Attn-pool"]})
        assert len(grid) == 4
        assert len({(c.align, c.pool) for c in grid}) == 4

    def test_matching_rows_collapse(self, tmp_path):
        (tmp_path / "grid.ini").write_text(GRID_INI)
        grid, run = load_grid(tmp_path / "grid.ini")
        heads = [c.head for c in grid]
        assert heads.count(HeadKind.Classification) == 4
        assert heads.count(HeadKind.Matching) == 1
        assert run.train.epochs == 1


class TestReport:
    def _report(self):
        return AblationReport(
            (
                AblationRow("vit-tiny", "txt-tiny", "T_to_I", "BERT", 0.5, 0.4),
                AblationRow("vit-tiny", "txt-tiny", "NA", "NA", math.nan, math.nan, HeadKind.Matching, "boom"),
            )
        )

    def test_csv_columns_exact(self):
        rows = list(csv.reader(io.StringIO(self._report().to_csv())))
        assert tuple(rows[0]) == COLUMNS == ("vision", "text", "align", "pool", "val_acc", "test_acc")
        assert rows[1] == ["vit-tiny", "txt-tiny", "T_to_I", "BERT", "0.5000", "0.4000"]

    def test_table_shows_failure(self):
        table = self._report().to_table()
        assert table.splitlines()[0].split()[:4] == ["Vision", "Text", "Align", "Pool"]
        assert "boom" in table

    def test_best_ignores_failures(self):
        report = self._report()
        assert report.best(HeadKind.Classification) == 0.4
        assert math.isnan(report.best(HeadKind.Matching))


class TestAblate:
    def test_rows_sorted_and_failure_recorded(self, monkeypatch):
        import mmfuse.ablation as ablation_mod
        from mmfuse.errors import TrainingError

        instances = synth_puzzles(0, 4, 8)
        split = puzzle_split(range(4))
        grid = [TINY, TINY.with_(pool="BERT"), TINY.with_(head="matching")]
        report = ablate(grid, QUICK, instances, split)
        assert len(report) == 3
        accs = [r.test_acc for r in report.rows]
        assert accs == sorted(accs, reverse=True)
        assert all(0.0 <= a <= 1.0 for a in accs)

        real_train = ablation_mod.train

        def flaky(cfg, *args):
            if cfg.pool.value == "BERT":
                raise TrainingError("non-finite loss nan at epoch 1, step 0")
            return real_train(cfg, *args)

        monkeypatch.setattr(ablation_mod, "train", flaky)
        bad = ablate([TINY.with_(pool="BERT"), TINY], QUICK, instances, split)
        failed = [r for r in bad.rows if not r.ok]
        assert len(failed) == 1 and bad.rows[-1] is failed[0]
        assert math.isnan(failed[0].test_acc)
        assert "step 0" in failed[0].error


class TestCli:
    def test_gen_train_eval(self, tmp_path, capsys):
        data = tmp_path / "data"
        assert main(["gen-data", "--seed", "1", "--roots", "4", "--per-root", "6", "--out", str(data)]) == 0
        (tmp_path / "run.ini").write_text("[model]\nvision = tiny\ntext = tiny\n[train]\nepochs = 1\nbatch_size = 8\n")
        ckpt = tmp_path / "out" / "model.ckpt"
        assert main(["train", "--config", str(tmp_path / "run.ini"), "--data", str(data), "--out", str(ckpt)]) == 0
        assert ckpt.exists() and (tmp_path / "out" / "model.ckpt.vocab").exists()
        capsys.readouterr()
        assert main(["eval", "--ckpt", str(ckpt), "--data", str(data), "--split", "test"]) == 0
        assert "test accuracy" in capsys.readouterr().out

    def test_ablate_writes_report(self, tmp_path, capsys):
        data = tmp_path / "data"
        main(["gen-data", "--roots", "4", "--per-root", "4", "--out", str(data)])
        grid = tmp_path / "grid.ini"
        grid.write_text(GRID_INI.replace("align = T_to_I, I_to_T\n", "").replace("classification, matching", "classification"))
        report = tmp_path / "report.csv"
        assert main(["ablate", "--grid", str(grid), "--data", str(data), "--report", str(report)]) == 0
        lines = report.read_text().splitlines()
        assert lines[0] == "vision,text,align,pool,val_acc,test_acc"
        assert len(lines) == 3

    def test_contract_violation_exits_nonzero(self, tmp_path, capsys):
        (tmp_path / "bad.ini").write_text("[model]\npool = max\n")
        code = main(["train", "--config", str(tmp_path / "bad.ini"), "--data", str(tmp_path), "--out", "x"])
        assert code != 0
        assert "error" in capsys.readouterr().err

    def test_eval_missing_checkpoint(self, tmp_path):
        assert main(["eval", "--ckpt", str(tmp_path / "none.ckpt"), "--data", str(tmp_path)]) != 0

    def test_gradcheck(self, capsys):
        assert main(["gradcheck"]) == 0
        out = capsys.readouterr().out
        assert "matmul" in out and "FAIL" not in out
