"""CLI wiring: exit codes, manifests, reproducible artifacts, reports."""

import csv
import json
import math
import os

import pytest

from unitforge.cli import (EXIT_INVALID_SPEC, EXIT_KIND_MISMATCH,
                           EXIT_MISSING_INPUT, EXIT_OK, EXIT_SEQUENCING,
                           build_spec, file_digest, main, parse_config)
from unitforge.data import CorpusSpec
from unitforge.errors import ConfigurationError


def write_cfg(path, **kv):
    with open(path, "w") as fh:
        for k, v in kv.items():
            fh.write(f"{k}={v}\n")
    return str(path)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Shared artifact chain: corpora and small checkpoints built once."""
    root = tmp_path_factory.mktemp("cli")
    sup_cfg = write_cfg(root / "sup.cfg", kind="supervised", size=8, seed=5)
    assert main(["gen-data", "--config", sup_cfg,
                 "--out", str(root / "sup")]) == EXIT_OK
    pref_cfg = write_cfg(root / "pref.cfg", kind="preference", size=6, seed=5)
    assert main(["gen-data", "--config", pref_cfg,
                 "--out", str(root / "pref")]) == EXIT_OK
    train_cfg = write_cfg(root / "train.cfg", layers=1, experts=1, steps=4,
                          batch=2, lr="1e-3", max_context=32)
    assert main(["train", "decoder-nar",
                 "--corpus", str(root / "sup" / "supervised.jsonl"),
                 "--config", train_cfg,
                 "--out", str(root / "nar")]) == EXIT_OK
    assert main(["train", "decoder-ar",
                 "--corpus", str(root / "sup" / "supervised.jsonl"),
                 "--config", train_cfg,
                 "--out", str(root / "ar")]) == EXIT_OK
    return root


# ---------------------------------------------------------------------------
# config parsing


def test_parse_config_coercion(tmp_path):
    path = tmp_path / "a.cfg"
    path.write_text("n=3\nlr=1e-4  # trailing comment\nname=adam\n"
                    "flag=true\n\n# full comment line\n")
    cfg = parse_config(path)
    assert cfg == {"n": 3, "lr": 1e-4, "name": "adam", "flag": True}


def test_parse_config_rejects_bare_words(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("justaword\n")
    with pytest.raises(ConfigurationError):
        parse_config(path)


def test_build_spec_rejects_unknown_keys():
    with pytest.raises(ConfigurationError):
        build_spec(CorpusSpec, {"sizzle": 4})
    spec = build_spec(CorpusSpec, {"size": 4, "seed": 9})
    assert spec.size == 4 and spec.seed == 9


# ---------------------------------------------------------------------------
# gen-data


def test_gen_data_reproducible(tmp_path):
    cfg = write_cfg(tmp_path / "c.cfg", kind="supervised", size=6, seed=11)
    for sub in ("one", "two"):
        assert main(["gen-data", "--config", cfg,
                     "--out", str(tmp_path / sub)]) == EXIT_OK
    d1 = file_digest(tmp_path / "one" / "supervised.jsonl")
    d2 = file_digest(tmp_path / "two" / "supervised.jsonl")
    assert d1 == d2


def test_gen_data_writes_sidecar_and_manifest(workdir):
    sidecar = workdir / "sup" / "supervised.jsonl.manifest.json"
    manifest = workdir / "sup" / "run_manifest.json"
    assert sidecar.exists() and manifest.exists()
    meta = json.loads(sidecar.read_text())
    assert meta["kind"] == "supervised"
    assert meta["spec"]["size"] == 8
    run = json.loads(manifest.read_text())
    assert run["command"] == "gen-data"
    assert run["run_id"]


def test_gen_data_bad_kind_exit_code(tmp_path):
    cfg = write_cfg(tmp_path / "c.cfg", kind="nonsense")
    assert main(["gen-data", "--config", cfg,
                 "--out", str(tmp_path)]) == EXIT_INVALID_SPEC


def test_gen_data_unknown_key_exit_code(tmp_path):
    cfg = write_cfg(tmp_path / "c.cfg", kind="supervised", wibble=3)
    assert main(["gen-data", "--config", cfg,
                 "--out", str(tmp_path)]) == EXIT_INVALID_SPEC


def test_missing_config_exit_code(tmp_path):
    assert main(["gen-data", "--config", str(tmp_path / "absent.cfg"),
                 "--out", str(tmp_path)]) == EXIT_MISSING_INPUT


# ---------------------------------------------------------------------------
# train / eval chain


def test_train_decoder_outputs(workdir):
    out = workdir / "nar"
    assert (out / "decoder.ckpt").exists()
    assert (out / "decoder.ckpt.meta.json").exists()
    rows = read_csv(out / "loss_curve.csv")
    assert rows[0] == ["step", "loss", "mode", "tgm_flag"]
    assert len(rows) == 5  # header + 4 steps


def test_eval_uer_runs(workdir, tmp_path):
    assert main(["eval", "uer",
                 "--checkpoint", str(workdir / "nar" / "decoder.ckpt"),
                 "--corpus", str(workdir / "sup" / "supervised.jsonl"),
                 "--out", str(tmp_path)]) == EXIT_OK
    rows = read_csv(tmp_path / "uer.csv")
    groups = {r[0] for r in rows[1:]}
    assert "overall" in groups


def test_eval_missing_checkpoint(workdir, tmp_path):
    assert main(["eval", "uer",
                 "--checkpoint", str(tmp_path / "ghost.ckpt"),
                 "--corpus", str(workdir / "sup" / "supervised.jsonl"),
                 "--out", str(tmp_path)]) == EXIT_MISSING_INPUT


def test_eval_wrong_corpus_kind(workdir, tmp_path):
    assert main(["eval", "uer",
                 "--checkpoint", str(workdir / "nar" / "decoder.ckpt"),
                 "--corpus", str(workdir / "pref" / "preference.jsonl"),
                 "--out", str(tmp_path)]) == EXIT_KIND_MISMATCH


def test_decoder_checkpoint_rejected_for_zero_shot(workdir, tmp_path):
    assert main(["eval", "zero-shot",
                 "--checkpoint", str(workdir / "nar" / "decoder.ckpt"),
                 "--corpus", str(workdir / "sup" / "supervised.jsonl"),
                 "--out", str(tmp_path)]) == EXIT_KIND_MISMATCH


def test_dpo_first_logged_loss_is_ln2(workdir, tmp_path):
    cfg = write_cfg(tmp_path / "dpo.cfg", steps=3, batch=2, lr="1e-4",
                    log_every=1)
    assert main(["train", "dpo",
                 "--corpus", str(workdir / "pref" / "preference.jsonl"),
                 "--init", str(workdir / "nar" / "decoder.ckpt"),
                 "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
    rows = read_csv(tmp_path / "dpo_metrics.csv")
    assert rows[0][:2] == ["step", "loss"]
    first_loss = float(rows[1][1])
    assert abs(first_loss - math.log(2.0)) < 1e-6
    assert (tmp_path / "policy.ckpt").exists()


def test_dpo_requires_init_checkpoint(workdir, tmp_path):
    assert main(["train", "dpo",
                 "--corpus", str(workdir / "pref" / "preference.jsonl"),
                 "--out", str(tmp_path)]) == EXIT_SEQUENCING


def test_align_stage_two_requires_init(tmp_path):
    cfg = write_cfg(tmp_path / "g.cfg", kind="image-text", n_image_text=4,
                    seed=2)
    assert main(["gen-data", "--config", cfg,
                 "--out", str(tmp_path)]) == EXIT_OK
    assert main(["train", "align-2",
                 "--corpus", str(tmp_path / "image-text.jsonl"),
                 "--out", str(tmp_path)]) == EXIT_SEQUENCING


def test_align_chain_and_stage_two_freezes_backbone(tmp_path):
    gen = {"speech-text": dict(kind="speech-text", n_speech_text=6, seed=2),
           "image-text": dict(kind="image-text", n_image_text=6, seed=2)}
    for name, kv in gen.items():
        cfg = write_cfg(tmp_path / f"{name}.cfg", **kv)
        assert main(["gen-data", "--config", cfg,
                     "--out", str(tmp_path)]) == EXIT_OK
    cfg1 = write_cfg(tmp_path / "s1.cfg", steps=2, batch=2, pretrain_steps=3)
    assert main(["train", "align-1",
                 "--corpus", str(tmp_path / "speech-text.jsonl"),
                 "--config", cfg1, "--out", str(tmp_path / "s1")]) == EXIT_OK
    ck1 = tmp_path / "s1" / "align.ckpt"
    assert ck1.exists()
    cfg2 = write_cfg(tmp_path / "s2.cfg", steps=2, batch=2)
    assert main(["train", "align-2",
                 "--corpus", str(tmp_path / "image-text.jsonl"),
                 "--init", str(ck1),
                 "--config", cfg2, "--out", str(tmp_path / "s2")]) == EXIT_OK
    # frozen-backbone stage: backbone weights bit-identical across stage II
    from unitforge.cli import load_align_model
    import numpy as np
    m1, _ = load_align_model(str(ck1))
    m2, _ = load_align_model(str(tmp_path / "s2" / "align.ckpt"))
    for k, v in m1.backbone_parameters().items():
        assert np.array_equal(v.data, m2.backbone_parameters()[k].data), k
    assert m2.completed_stages >= {"I", "II"}


# ---------------------------------------------------------------------------
# decode / bench / ablate


def test_decode_round_trip(workdir, tmp_path):
    assert main(["decode",
                 "--checkpoint", str(workdir / "nar" / "decoder.ckpt"),
                 "--contexts", str(workdir / "sup" / "supervised.jsonl"),
                 "--out", str(tmp_path)]) == EXIT_OK
    from unitforge.data import read_jsonl
    records = read_jsonl(tmp_path / "decoded.jsonl")
    assert len(records) == 8
    for rec in records:
        assert rec["kind"] == "decoded_units"
        assert rec["sequential_steps"] == 1  # parallel decoder


def test_bench_latency_report(workdir, tmp_path):
    assert main(["bench-latency",
                 "--checkpoint-ar", str(workdir / "ar" / "decoder.ckpt"),
                 "--checkpoint-nar", str(workdir / "nar" / "decoder.ckpt"),
                 "--corpus", str(workdir / "sup" / "supervised.jsonl"),
                 "--out", str(tmp_path)]) == EXIT_OK
    rows = read_csv(tmp_path / "latency.csv")
    assert rows[-1][0] == "median"
    for row in rows[1:-1]:
        assert row[3] == "1"  # nar_steps


def test_bench_latency_checkpoint_order(workdir, tmp_path):
    assert main(["bench-latency",
                 "--checkpoint-ar", str(workdir / "nar" / "decoder.ckpt"),
                 "--checkpoint-nar", str(workdir / "ar" / "decoder.ckpt"),
                 "--corpus", str(workdir / "sup" / "supervised.jsonl"),
                 "--out", str(tmp_path)]) == EXIT_KIND_MISMATCH


def test_ablate_tiny_grid(workdir, tmp_path):
    cfg = write_cfg(tmp_path / "g.cfg", grid_experts="1,2", grid_layers="1",
                    steps=3, batch=2, layers=1, experts=1, max_context=32)
    assert main(["ablate",
                 "--corpus", str(workdir / "sup" / "supervised.jsonl"),
                 "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
    rows = read_csv(tmp_path / "ablation.csv")
    assert rows[0][0] == "experts"
    assert [r[0] for r in rows[1:]] == ["1", "2"]
    assert all(r[7] == "" for r in rows[1:])  # no cell errors


# ---------------------------------------------------------------------------
# reports and eval without models


def test_partition_check_sums_to_one(tmp_path):
    cfg = write_cfg(tmp_path / "p.cfg", t=3, v=2)
    assert main(["eval", "partition-check", "--config", cfg,
                 "--out", str(tmp_path)]) == EXIT_OK
    rows = read_csv(tmp_path / "partition_check.csv")
    total = float(dict((r[0], r[1]) for r in rows[1:])["total_probability"])
    assert abs(total - 1.0) < 1e-6


def test_reports_dual_emit(workdir):
    out = workdir / "nar"
    assert (out / "loss_curve.csv").exists()
    assert (out / "loss_curve.txt").exists()
    txt = (out / "loss_curve.txt").read_text().splitlines()
    assert txt[0].split() == ["step", "loss", "mode", "tgm_flag"]


def test_manifest_digests_inputs(workdir):
    run = json.loads((workdir / "nar" / "run_manifest.json").read_text())
    corpus = str(workdir / "sup" / "supervised.jsonl")
    assert run["inputs"][corpus] == file_digest(corpus)
