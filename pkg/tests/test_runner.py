import ast
import csv
import json
import xml.etree.ElementTree as ET
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

import hetal.acquisition
from hetal import cli
from hetal.data import DataPool, load_pool
from hetal.errors import ConfigurationError, InputError
from hetal.runner import (
    CSV_COLUMNS,
    ExperimentConfig,
    RoundRecord,
    build_dataset,
    config_overrides,
    emit_results,
    learning_curves,
    load_config,
    read_rounds_csv,
    run_experiment,
    run_round,
    summarize,
    write_rounds_csv,
)


def tiny(**kw):
    base = dict(dataset="mini_images", noise="noisy_blank", strategy="rand", rounds=2, k=10, init_labeled=20,
                n_per_class=10, n_test_per_class=5, epochs=3, hidden=(16,), record_wall_time=False)
    base.update(kw)
    return ExperimentConfig(**base)


def tiny_moons(**kw):
    base = dict(dataset="four_moons", noise="none", strategy="coreset", rounds=2, k=5, init_labeled=8,
                n_per_class=20, n_test_per_class=10, epochs=3, hidden=(8,), record_wall_time=False)
    base.update(kw)
    return ExperimentConfig(**base)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        tiny(dataset="cifar")
    with pytest.raises(ValueError):
        tiny(strategy="nope")
    with pytest.raises(ConfigurationError):
        tiny(rounds=0)
    with pytest.raises(ConfigurationError):
        tiny(seeds=())
    with pytest.raises(ConfigurationError):
        ExperimentConfig(dataset="four_moons", noise="noisy_blank")
    with pytest.raises(ConfigurationError):
        build_dataset(tiny(k=1000), 0)


def test_dropout_defaults_follow_strategy():
    assert tiny(strategy="bald").dropout_rate() == 0.1
    assert tiny(strategy="conf").dropout_rate() == 0.0
    assert tiny(strategy="conf", dropout=0.3).dropout_rate() == 0.3


def test_noise_spec_defaults_reach_the_mix():
    spec = tiny(n_per_class=100).noise_spec(0)
    assert spec.n_noisy == 4000 and spec.k_unique == 1
    pool, test = build_dataset(tiny(n_per_class=100), 0)
    assert pool.is_noisy.mean() == pytest.approx(0.8)
    assert len(test.y) == 50
    for kind in ("noisy_diverse", "noisy_class"):
        pool, _ = build_dataset(tiny(noise=kind, n_per_class=30, k_unique=10), 1)
        assert pool.is_noisy.mean() == pytest.approx(0.8, abs=0.01)


def test_four_moons_test_split_is_clean():
    pool, test = build_dataset(tiny_moons(), 0)
    assert pool.n == 80 and len(pool.labeled_idx) == 8
    assert len(test.y) == 30
    assert 2 not in set(test.y.tolist())


def test_run_round_invariants():
    config = tiny(strategy="conf")
    pool, test = build_dataset(config, 0)
    n_lab, n_unl = len(pool.labeled_idx), len(pool.unlabeled_idx)
    seen, history = set(), []
    for r in range(3):
        before = set(pool.unlabeled_idx.tolist())
        pool, rec, state, ema = run_round(pool, test, config, r, 0, history)
        history.append(rec)
        picked = set(rec.selected_indices)
        assert len(picked) == rec.k == config.k
        assert picked <= before and not picked & seen
        seen |= picked
        assert len(pool.labeled_idx) + len(pool.unlabeled_idx) == n_lab + n_unl
        assert len(pool.labeled_idx) == n_lab + (r + 1) * config.k
        assert 0 <= rec.test_acc <= 1 and 0 <= rec.cum_clean_frac <= 1
        assert rec.wall_ms == 0
    total_clean = sum(r.clean_selected for r in history)
    assert history[-1].cum_clean_frac == pytest.approx(total_clean / (3 * config.k))


def test_acquisition_is_blind_to_provenance_and_hidden_labels():
    """Scrambling is_noisy and every unlabeled label must not change what gets picked."""
    for strategy in ("rand", "conf", "marg", "bald", "coreset", "badge", "lhd"):
        config = tiny(strategy=strategy, rounds=1)
        pool, test = build_dataset(config, 3)
        rng = np.random.default_rng(0)
        labels = pool.labels.copy()
        labels[pool.unlabeled_idx] = rng.integers(0, pool.n_classes, len(pool.unlabeled_idx))
        scrambled = replace(pool, labels=labels, is_noisy=rng.random(pool.n) < 0.5)
        _, a, _, _ = run_round(pool, test, config, 0, 3)
        _, b, _, _ = run_round(scrambled, test, config, 0, 3)
        assert a.selected_indices == b.selected_indices, strategy


def test_acquisition_module_never_touches_labels_or_flags():
    # static half of the audit: the strategy code has no way to name the hidden fields
    tree = ast.parse(Path(hetal.acquisition.__file__).read_text())
    attrs = {node.attr for node in ast.walk(tree) if isinstance(node, ast.Attribute)}
    assert "is_noisy" not in attrs and "labels" not in attrs
    names = {node.id for node in ast.walk(tree) if isinstance(node, ast.Name)}
    assert "DataPool" not in names


def test_csv_round_trip_and_row_count(tmp_path):
    result = run_experiment(tiny(seeds=(0, 1)), emit=False)
    path = tmp_path / "rounds.csv"
    write_rounds_csv(result.records, path)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert len(lines) == 2 * 2 + 1
    back = read_rounds_csv(path)
    for orig, got in zip(result.records, back):
        assert replace(orig, selected_indices=()) == got


def test_csv_with_bad_header_is_rejected(tmp_path):
    path = tmp_path / "x.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(InputError):
        read_rounds_csv(path)


def test_identical_csv_bytes_across_runs(tmp_path):
    for i in range(2):
        run_experiment(tiny(strategy="lhd", seeds=(4,), out=str(tmp_path / f"r{i}")))
    a = (tmp_path / "r0" / "rounds.csv").read_bytes()
    b = (tmp_path / "r1" / "rounds.csv").read_bytes()
    assert a == b


def test_summary_statistics():
    recs = [
        RoundRecord(0, "conf", 0, 0.5, 3, 10, 0.3, 1.0, 0),
        RoundRecord(0, "conf", 1, 0.7, 5, 10, 0.4, 1.0, 0),
        RoundRecord(1, "conf", 0, 0.6, 1, 10, 0.1, 1.0, 0),
        RoundRecord(1, "conf", 1, 0.9, 1, 10, 0.1, 1.0, 0),
    ]
    s = summarize(recs)["conf"]
    assert s["final_acc_mean"] == pytest.approx(0.8)
    assert s["final_acc_std"] == pytest.approx(0.1)
    assert s["cum_clean_frac_mean"] == pytest.approx(0.25)
    assert s["final_acc_std"] >= 0
    assert learning_curves(recs)["conf"] == pytest.approx([0.55, 0.8])


def test_emit_results_writes_parseable_files(tmp_path):
    config = tiny_moons(out=str(tmp_path / "out"))
    result = run_experiment(config)
    out = Path(config.out)
    for name in ("rounds.csv", "summary.json", "learning_curve.svg"):
        assert (out / name).exists()
    svgs = list(out.glob("*.svg"))
    assert len(svgs) == 2  # learning curve plus one decision-region plot
    for path in svgs:
        root = ET.parse(path).getroot()
        assert root.tag.endswith("svg")
    payload = json.loads((out / "summary.json").read_text())
    assert payload["summary"]["coreset"]["seeds"] == [0]
    assert len(payload["selected"]) == config.rounds
    assert result.scatters and result.scatters[0].grid_pred.shape == (60, 60)


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "exp.cfg"
    path.write_text("# comment\ndataset = four_moons\nnoise=none\nrounds=3\nseeds=0,1\nhidden=8,4\nfinetune=yes\n"
                    "dropout = none\n")
    config = load_config(path, k=7)
    assert (config.dataset, config.rounds, config.k, config.seeds, config.hidden) == ("four_moons", 3, 7, (0, 1), (8, 4))
    assert config.finetune is True and config.dropout is None
    assert config_overrides({"ft-lr": "0.01"}) == {"ft_lr": 0.01}
    with pytest.raises(ConfigurationError):
        config_overrides({"bogus": "1"})
    with pytest.raises(ConfigurationError):
        config_overrides({"rounds": "many"})


def test_cli_run_and_export(tmp_path, capsys):
    out = tmp_path / "cli"
    code = cli.main(["run", "--dataset", "four_moons", "--strategy", "rand,conf", "--rounds", "2", "--k", "5",
                     "--init-labeled", "8", "--seeds", "0", "--out", str(out),
                     "--set", "n_per_class=20", "--set", "epochs=2", "--set", "hidden=8"])
    assert code == 0
    rows = list(csv.DictReader(open(out / "rounds.csv")))
    assert [r["strategy"] for r in rows] == ["rand", "rand", "conf", "conf"]
    assert "mean_final_acc" in capsys.readouterr().out

    pool_path = tmp_path / "pool.txt"
    code = cli.main(["export-pool", "--dataset", "four_moons", "--init-labeled", "8", "--rounds", "1",
                     "--k", "1", "--set", "n_per_class=10", str(pool_path)])
    assert code == 0
    pool = load_pool(pool_path)
    assert isinstance(pool, DataPool) and pool.n == 40 and len(pool.labeled_idx) == 8


def test_cli_reports_errors(capsys):
    assert cli.main(["run", "--set", "bogus=1"]) == 2
    assert "unknown config key" in capsys.readouterr().err


def test_cli_theory(tmp_path, capsys):
    code = cli.main(["theory", "--n", "12", "--s", "4", "--q", "2", "--dim", "6", "--trials", "3",
                     "--restarts", "1", "--steps", "20", "--epochs", "5", "--out", str(tmp_path / "th")])
    assert code == 0
    text = capsys.readouterr().out
    assert "bound (rhs)" in text and "Q estimate" in text
    assert len((tmp_path / "th" / "q_trials.csv").read_text().splitlines()) == 4
