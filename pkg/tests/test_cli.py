import csv
import hashlib
import re
from pathlib import Path

import numpy as np
import pytest
import yaml

from placerec.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, FUSION_ROWS, MODALITY_ROWS, ablation_cells, main
from placerec.experiment import (
    config_from_dict,
    evaluate_model,
    fit_model,
    load_config,
    load_dataset,
    parse_modalities,
)
from placerec.fusion import FUSION_LABELS
from placerec.retrieval import evaluate, load_database
from placerec.training import LOG_COLUMNS, embed

TINY = {
    "modalities": "L+I(F)",
    "world": {"num_places": 24, "area_side": 700.0, "image_size": [16, 16]},
    "model": {"widths": [4, 8], "bev": {"resolution": 16}},
    "train": {"epochs": 2},
}


def write_cfg(tmp_path, data, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data))
    return str(path)


def tree_digest(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("trained")
    cfg = write_cfg(tmp, TINY)
    assert main(["--config", cfg, "--out", str(tmp / "run"), "train"]) == EXIT_OK
    return tmp, cfg


# -- synth ---------------------------------------------------------------------------


def test_synth_reproducible_and_trainable(tmp_path):
    cfg = write_cfg(tmp_path, TINY)
    assert main(["--config", cfg, "--out", str(tmp_path / "a"), "synth"]) == EXIT_OK
    assert main(["--config", cfg, "--out", str(tmp_path / "b"), "synth"]) == EXIT_OK
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    assert (tmp_path / "a" / "config.yaml").is_file()
    rc = main(["--config", cfg, "--out", str(tmp_path / "t"), "train", "--data", str(tmp_path / "a")])
    assert rc == EXIT_OK
    assert main(["--config", cfg, "--seed", "9", "--out", str(tmp_path / "c"), "synth"]) == EXIT_OK
    assert tree_digest(tmp_path / "a") != tree_digest(tmp_path / "c")


def test_synth_bad_config_exit_code(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {"world": {"num_places": 1}})
    assert main(["--config", cfg, "--out", str(tmp_path / "x"), "synth"]) == EXIT_CONFIG
    assert "num_places" in capsys.readouterr().err


def test_config_errors(tmp_path):
    for bad in ({"fusion": "max"}, {"modalities": "L(A)"}, {"modalities": "I(F)+S(A)"}, {"colour": 1},
                {"train": {"epochs": 0}}, {"world": {"noise": {"scale": -1}}}):
        assert main(["--config", write_cfg(tmp_path, bad), "--out", str(tmp_path / "x"), "synth"]) == EXIT_CONFIG
    assert main(["--config", str(tmp_path / "nope.yaml"), "synth"]) == EXIT_CONFIG
    (tmp_path / "broken.yaml").write_text("a: [1,")
    assert main(["--config", str(tmp_path / "broken.yaml"), "synth"]) == EXIT_CONFIG


def test_seed_flag_before_or_after_subcommand(tmp_path):
    cfg = write_cfg(tmp_path, TINY)
    main(["--seed", "3", "--config", cfg, "--out", str(tmp_path / "a"), "synth"])
    main(["synth", "--seed", "3", "--config", cfg, "--out", str(tmp_path / "b")])
    assert load_config(tmp_path / "a" / "config.yaml").seed == 3
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_missing_data_exit_code(tmp_path):
    cfg = write_cfg(tmp_path, TINY)
    assert main(["--config", cfg, "--out", str(tmp_path / "t"), "train", "--data", str(tmp_path / "nothing")]) \
        == EXIT_DATA
    assert main(["--out", str(tmp_path / "e"), "eval", "--checkpoint", str(tmp_path / "none")]) == EXIT_DATA


# -- train ---------------------------------------------------------------------------


def test_train_outputs(trained):
    tmp, _ = trained
    run = tmp / "run"
    with open(run / "epoch_log.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == LOG_COLUMNS
    assert len(rows) == 3
    meta = yaml.safe_load((run / "checkpoint.yaml").read_text())
    assert meta["descriptor_dim"] == 512
    assert [s[0] for s in meta["layout"]] == ["cloud", "image"]
    assert load_config(run / "config.yaml").modalities == "L+I(F)"


def test_train_rerun_identical(trained, tmp_path):
    tmp, cfg = trained
    assert main(["--config", cfg, "--out", str(tmp_path / "again"), "train"]) == EXIT_OK
    assert (tmp_path / "again" / "epoch_log.csv").read_bytes() == (tmp / "run" / "epoch_log.csv").read_bytes()
    assert (tmp_path / "again" / "model.pkt").read_bytes() == (tmp / "run" / "model.pkt").read_bytes()


# -- eval, build-db, query -----------------------------------------------------------


def test_eval_matches_api(trained, tmp_path):
    tmp, cfg = trained
    out = tmp_path / "eval"
    assert main(["--out", str(out), "eval", "--checkpoint", str(tmp / "run")]) == EXIT_OK
    with open(out / "metrics.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["name", "AR@1", "AR@1%"]
    recall = (out / "recall.csv").read_text().splitlines()
    assert recall[0] == "N,recall" and len(recall) == 26
    assert (out / "recall.svg").read_text().startswith("<svg")
    assert (out / "config.yaml").is_file()

    conf = load_config(cfg)
    dataset = load_dataset(conf)
    result, text = fit_model(conf, dataset)
    db, metrics, q_table = evaluate_model(conf, dataset, result.model, text)
    assert rows[0]["AR@1"] == f"{metrics.ar1:.2f}"
    assert rows[0]["AR@1%"] == f"{metrics.ar1p:.2f}"
    assert [line.split(",")[1] for line in recall[1:]] == [f"{v:.2f}" for v in metrics.recall]
    # the stored database must give the same metrics when queried directly
    assert main(["--out", str(tmp_path / "db"), "build-db", "--checkpoint", str(tmp / "run")]) == EXIT_OK
    stored = load_database(tmp_path / "db" / "database.pdb")
    np.testing.assert_array_equal(stored.descriptors, db.descriptors)
    assert stored.ids == db.ids
    again = evaluate(stored, embed(result.model, q_table), q_table.positions)
    assert again.ar1 == metrics.ar1


def test_query_command(trained, tmp_path, capsys):
    tmp, _ = trained
    assert main(["--out", str(tmp_path / "db"), "build-db", "--checkpoint", str(tmp / "run")]) == EXIT_OK
    db = load_database(tmp_path / "db" / "database.pdb")
    qid = db.ids[0].replace("_t00", "_t02")
    rc = main(["--out", str(tmp_path / "q"), "query", "--checkpoint", str(tmp / "run"),
               "--database", str(tmp_path / "db" / "database.pdb"), "--id", qid, "-k", "3"])
    assert rc == EXIT_OK
    lines = (tmp_path / "q" / "query.csv").read_text().splitlines()
    assert lines[0] == "query,rank,id,distance" and len(lines) == 4
    dists = [float(line.split(",")[3]) for line in lines[1:]]
    assert dists == sorted(dists)
    rc = main(["--out", str(tmp_path / "q"), "query", "--checkpoint", str(tmp / "run"),
               "--database", str(tmp_path / "db" / "database.pdb"), "--id", "p99999_t00"])
    assert rc == EXIT_DATA


# -- ablate --------------------------------------------------------------------------


def test_ablation_row_sets():
    cfg = config_from_dict({"modalities": "L+I(A)"})
    _, cells = ablation_cells(cfg, "fusion-methods")
    assert [labels[1] for labels, _ in cells] == ["Add", "Concat", "GeM-1D", "MLP512", "MLP256", "SA+Add",
                                                  "SA+Concat"]
    assert all(parse_modalities(c.modalities)[1] == "F+B" for _, c in cells)
    _, cells = ablation_cells(cfg, "camera-sets")
    assert [labels[0] for labels, _ in cells] == ["F", "F+B", "L+R", "A"]
    _, cells = ablation_cells(cfg, "modality-sets")
    names = [labels[0] for labels, _ in cells]
    for want in ("I(A)", "L", "L+I(A)", "L+I(A)+S(A)", "L+I(A)+T(A)", "L+I(A)+S(A)+T(A)"):
        assert want in names
    seeds = [c.seed for _, c in cells]
    assert len(set(seeds)) == len(seeds)
    assert {c.world_seed for _, c in cells} == {0}
    assert [FUSION_LABELS[m] for m in FUSION_ROWS][0] == "Add"
    assert len(MODALITY_ROWS) == 11


def test_ablation_dims_follow_row_set():
    cfg = config_from_dict({})
    _, cells = ablation_cells(cfg, "modality-sets")
    for labels, c in cells:
        n = len(parse_modalities(c.modalities)[0])
        assert c.model_config(4).descriptor_dim == 256 * n, labels


def _unmark(cell):
    return float(cell.strip().strip("*_"))


def test_ablate_end_to_end(tmp_path):
    data = {**TINY, "modalities": "I(F)", "train": {"epochs": 1}}
    cfg = write_cfg(tmp_path, data)
    out = tmp_path / "abl"
    assert main(["--config", cfg, "--out", str(out), "ablate", "--axis", "fusion-methods"]) == EXIT_OK
    with open(out / "results.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["Fusion method"] for r in rows] == [FUSION_LABELS[m] for m in FUSION_ROWS]
    assert [int(r["Descriptor dim"]) for r in rows] == [256, 512, 256, 512, 256, 256, 512]
    text_rows = (out / "results.txt").read_text().splitlines()[2:]
    for col in ("AR@1", "AR@1%"):
        values = [float(r[col]) for r in rows]
        ranked = sorted(set(values), reverse=True)
        idx = list(rows[0]).index(col)
        for r, line, v in zip(rows, text_rows, values):
            cell = [c.strip() for c in line.split("|")][idx]
            assert _unmark(cell) == v
            if v == ranked[0]:
                assert cell.startswith("**")
            elif len(ranked) > 1 and v == ranked[1]:
                assert cell.startswith("__")
            else:
                assert not re.match(r"[*_]", cell)
    assert (out / "recall.svg").is_file() and (out / "config.yaml").is_file()
