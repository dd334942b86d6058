"""Command-line orchestration: corpus generation, staged training,
preference optimization, decoding, evaluation, ablation grids, and the
latency benchmark.

Every command writes a run manifest next to its outputs. Report content
is a pure function of the input files; wall-clock readings go to the log,
never into checksummed report fields.

Exit codes: 0 ok, 2 missing input, 3 invalid spec/config, 4 stage
sequencing violation, 5 checkpoint/corpus kind mismatch.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields

import numpy as np

from . import alignment as al
from . import tensor as T
from .data import (AlignmentSpec, CorpusSpec, corpus_manifest,
                   emotion_oracle_classify, gen_emotion_eval_corpus,
                   gen_image_text_corpus, gen_instruct_corpus,
                   gen_preference_corpus, gen_speech_text_corpus,
                   gen_supervised_corpus, decode_f32, read_jsonl,
                   unit_error_rate, write_jsonl)
from .ctc import brute_force_marginals
from .decoder import (SpeechDecoder, SpeechDecoderConfig, TrainSchedule,
                      evaluate_uer, feasible, train_decoder)
from .errors import (ConfigurationError, DataError, KindMismatchError,
                     SequencingError, UnitforgeError)
from .preference import (DpoConfig, DpoSchedule, pairs_from_records,
                         preference_accuracy, train_dpo)

log = logging.getLogger("unitforge")

EXIT_OK = 0
EXIT_MISSING_INPUT = 2
EXIT_INVALID_SPEC = 3
EXIT_SEQUENCING = 4
EXIT_KIND_MISMATCH = 5

GENERATORS = {
    "supervised": gen_supervised_corpus,
    "preference": gen_preference_corpus,
    "emotion-eval": gen_emotion_eval_corpus,
    "speech-text": gen_speech_text_corpus,
    "image-text": gen_image_text_corpus,
    "instruct": gen_instruct_corpus,
    "probe": lambda spec: gen_instruct_corpus(spec, with_speech=True,
                                              rng_seed=spec.seed + 1),
}
UNIT_KINDS = ("supervised", "preference", "emotion-eval")


# ---------------------------------------------------------------------------
# config / manifest plumbing


def _coerce(value: str):
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    low = value.lower()
    if low in ("true", "on", "yes"):
        return True
    if low in ("false", "off", "no"):
        return False
    return value


def parse_config(path) -> dict:
    """key=value lines; '#' starts a comment."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    cfg = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{line_no}: expected key=value")
            key, value = line.split("=", 1)
            cfg[key.strip()] = _coerce(value.strip())
    return cfg


def load_config(args) -> dict:
    cfg = parse_config(args.config) if args.config else {}
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    return cfg


def build_spec(cls, cfg: dict, aliases=None):
    """Populate a dataclass from config keys; unknown keys are rejected."""
    aliases = aliases or {}
    names = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in cfg.items():
        name = aliases.get(key, key)
        if name is None:
            continue
        if name not in names:
            raise ConfigurationError(f"unknown config key {key!r} for "
                                     f"{cls.__name__}")
        kwargs[name] = value
    return cls(**kwargs)


def _take(cfg: dict, keys: dict) -> dict:
    """Pop cfg entries named in keys (alias map), return the popped dict."""
    out = {}
    for key, name in keys.items():
        if key in cfg:
            out[name] = cfg.pop(key)
    return out


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command, args_dict, inputs, outputs):
    body = {
        "command": command,
        "args": {k: v for k, v in sorted(args_dict.items())
                 if v is not None and not callable(v)},
        "inputs": {p: file_digest(p) for p in inputs if os.path.exists(p)},
        "outputs": sorted(outputs),
    }
    run_id = hashlib.sha256(
        json.dumps(body, sort_keys=True).encode()).hexdigest()[:12]
    body["run_id"] = run_id
    body["timestamp"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    path = os.path.join(out_dir, "run_manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(body, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return run_id


def ensure_out(args) -> str:
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# reports


def write_report(out_dir, name, header, rows, fmt="csv"):
    """Dual-emit: CSV for machines, aligned columns for humans."""
    rows = [[("" if v is None else v) for v in row] for row in rows]
    csv_path = os.path.join(out_dir, f"{name}.csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    txt_path = os.path.join(out_dir, f"{name}.txt")
    table = [list(map(str, header))] + [list(map(str, r)) for r in rows]
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    with open(txt_path, "w", encoding="utf-8") as fh:
        for r in table:
            fh.write("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
            fh.write("\n")
    shown = csv_path if fmt == "csv" else txt_path
    with open(shown, encoding="utf-8") as fh:
        sys.stdout.write(fh.read())
    return [csv_path, txt_path]


# ---------------------------------------------------------------------------
# corpus + checkpoint loading helpers


def load_corpus(path, expect_kinds=None) -> list:
    if not os.path.exists(path):
        raise FileNotFoundError(f"corpus file not found: {path}")
    records = read_jsonl(path)
    if not records:
        raise DataError(f"{path}: empty corpus")
    if expect_kinds is not None:
        kinds = {rec.get("kind") for rec in records}
        if not kinds <= set(expect_kinds):
            raise KindMismatchError(
                f"{path}: corpus kind {sorted(kinds)} incompatible, "
                f"expected one of {sorted(expect_kinds)}"
            )
    return records


def _require(path, what):
    if path is None:
        raise SequencingError(f"{what} is required for this stage")
    if not os.path.exists(path):
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def load_speech_decoder(path) -> SpeechDecoder:
    _require(path, "decoder checkpoint")
    meta_path = str(path) + ".meta.json"
    if not os.path.exists(meta_path):
        raise KindMismatchError(f"{path}: not a decoder checkpoint "
                                "(missing .meta.json)")
    with open(meta_path) as fh:
        if "mode" not in json.load(fh):
            raise KindMismatchError(f"{path}: not a decoder checkpoint")
    return SpeechDecoder.load(path)


def save_align_model(model: al.OmniModel, path, arch: dict):
    model.save(path)
    spec = asdict(model.spec)
    spec["seq_len"] = list(spec["seq_len"])
    with open(str(path) + ".meta.json", "w") as fh:
        json.dump({"alignment_spec": spec, "arch": arch}, fh, sort_keys=True)
        fh.write("\n")


def load_align_model(path) -> tuple:
    _require(path, "alignment checkpoint")
    meta_path = str(path) + ".meta.json"
    if not os.path.exists(meta_path):
        raise KindMismatchError(f"{path}: not an alignment checkpoint")
    with open(meta_path) as fh:
        meta = json.load(fh)
    if "alignment_spec" not in meta:
        raise KindMismatchError(f"{path}: not an alignment checkpoint")
    spec_dict = dict(meta["alignment_spec"])
    spec_dict["seq_len"] = tuple(spec_dict["seq_len"])
    spec = AlignmentSpec(**spec_dict)
    model = al.OmniModel(spec, **meta["arch"])
    model.load(path)
    return model, meta["arch"]


def corpus_spec_from_sidecar(corpus_path, cls):
    sidecar = str(corpus_path) + ".manifest.json"
    if os.path.exists(sidecar):
        with open(sidecar) as fh:
            spec_dict = json.load(fh).get("spec", {})
        for key in ("seq_len", "len_a", "len_b"):
            if key in spec_dict:
                spec_dict[key] = tuple(spec_dict[key])
        return cls(**spec_dict)
    return cls()


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    out = ensure_out(args)
    cfg = load_config(args)
    kind = cfg.pop("kind", None)
    if kind not in GENERATORS:
        raise ConfigurationError(
            f"spec must set kind to one of {sorted(GENERATORS)}, got {kind!r}"
        )
    cls = CorpusSpec if kind in UNIT_KINDS else AlignmentSpec
    for key in ("len_a", "len_b", "seq_len"):
        if key in cfg and isinstance(cfg[key], str):
            cfg[key] = tuple(int(v) for v in cfg[key].split(","))
    spec = build_spec(cls, cfg)
    if hasattr(spec, "validate"):
        spec.validate()
    records = GENERATORS[kind](spec)
    corpus_path = os.path.join(out, f"{kind}.jsonl")
    write_jsonl(corpus_path, records)
    spec_dict = asdict(spec)
    for key in ("len_a", "len_b", "seq_len"):
        if key in spec_dict:
            spec_dict[key] = list(spec_dict[key])
    with open(corpus_path + ".manifest.json", "w") as fh:
        json.dump({"kind": kind, "spec": spec_dict,
                   "counts": corpus_manifest(records)},
                  fh, sort_keys=True)
        fh.write("\n")
    write_manifest(out, "gen-data", vars(args),
                   [args.config] if args.config else [],
                   [corpus_path, corpus_path + ".manifest.json"])
    log.info("wrote %d %s records to %s", len(records), kind, corpus_path)
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _decoder_config(cfg: dict, mode: str) -> SpeechDecoderConfig:
    aliases = {"dim": "model_dim", "vocab": "vocab_nar", "lambda": "upsample"}
    cfg = dict(cfg)
    cfg["mode"] = mode
    return build_spec(SpeechDecoderConfig, cfg, aliases)


def _train_decoder_stage(args, mode: str) -> int:
    out = ensure_out(args)
    cfg = load_config(args)
    sched_kw = _take(cfg, {"lr": "lr", "steps": "steps", "batch": "batch",
                           "warmup": "warmup_ratio",
                           "weight_decay": "weight_decay"})
    sched_kw["seed"] = cfg.get("seed", 0)
    schedule = TrainSchedule(**sched_kw)
    config = _decoder_config(cfg, mode)
    records = load_corpus(args.corpus, ("supervised_units",))
    decoder, curve = train_decoder(records, config, schedule)
    ckpt = os.path.join(out, "decoder.ckpt")
    decoder.save(ckpt)
    tgm_flag = "on" if config.tgm else "off"
    outputs = write_report(out, "loss_curve",
                           ["step", "loss", "mode", "tgm_flag"],
                           [[s, f"{v:.6f}", mode, tgm_flag] for s, v in curve],
                           args.format)
    write_manifest(out, f"train-decoder-{mode}", vars(args),
                   [p for p in (args.config, args.corpus) if p],
                   [ckpt] + outputs)
    return EXIT_OK


def _align_arch(cfg: dict) -> dict:
    return {"d": cfg.pop("d", 32), "layers": cfg.pop("layers", 2),
            "heads": cfg.pop("heads", 2), "seed": cfg.pop("seed", 0)}


def _train_align_stage(args, stage: str) -> int:
    out = ensure_out(args)
    cfg = load_config(args)
    corpus_kind = {"I": "speech_text", "II": "image_text",
                   "III": "instruct"}[stage]
    records = load_corpus(args.corpus, (corpus_kind,))
    sched_kw = _take(cfg, {"lr": "lr", "steps": "steps", "batch": "batch",
                           "warmup": "warmup_ratio"})
    pretrain_steps = cfg.pop("pretrain_steps", 500)
    pretrain_lr = cfg.pop("pretrain_lr", 1e-3)
    if stage == "I":
        arch = _align_arch(cfg)
        seed = arch.pop("seed")
        spec = corpus_spec_from_sidecar(args.corpus, AlignmentSpec)
        model = al.OmniModel(spec, seed=seed, **arch)
        al.pretrain_backbone(model, steps=pretrain_steps, lr=pretrain_lr,
                             seed=seed, seq_len=spec.seq_len)
    else:
        model, arch = load_align_model(_require(args.init, "--init checkpoint"))
        arch = dict(arch)
        arch.pop("seed", None)
    schedule = al.default_schedule(stage, **sched_kw)
    metrics = al.run_stage(model, schedule, records)
    ckpt = os.path.join(out, "align.ckpt")
    save_align_model(model, ckpt, arch)
    outputs = write_report(out, "metrics", ["step", "stage", "loss", "lr"],
                           [[s, st, f"{v:.6f}", f"{lr:.2e}"]
                            for s, st, v, lr in metrics], args.format)
    write_manifest(out, f"train-align-{stage}", vars(args),
                   [p for p in (args.config, args.corpus, args.init) if p],
                   [ckpt] + outputs)
    return EXIT_OK


def _train_dpo(args) -> int:
    out = ensure_out(args)
    cfg = load_config(args)
    reference = load_speech_decoder(_require(args.init,
                                             "--init reference checkpoint"))
    if reference.config.mode != "nar":
        raise KindMismatchError("preference training expects a NAR reference")
    reference.set_trainable(False)
    policy = load_speech_decoder(args.init)
    pairs = pairs_from_records(load_corpus(args.corpus, ("preference",)))
    sched_kw = _take(cfg, {"lr": "lr", "steps": "steps", "batch": "batch",
                           "warmup": "warmup_ratio", "log_every": "log_every"})
    sched_kw["seed"] = cfg.pop("seed", 0)
    dpo_cfg = DpoConfig(beta=cfg.pop("beta", 0.1),
                        reference_checkpoint=args.init)
    if cfg:
        raise ConfigurationError(f"unknown config keys {sorted(cfg)} for dpo")
    metrics = train_dpo(policy, reference, pairs, dpo_cfg,
                        DpoSchedule(**sched_kw))
    ckpt = os.path.join(out, "policy.ckpt")
    policy.save(ckpt)
    rows = [[s, f"{v:.6f}",
             "" if np.isnan(m) else f"{m:.6f}",
             "" if np.isnan(a) else f"{a:.4f}"]
            for s, v, m, a in metrics]
    outputs = write_report(out, "dpo_metrics",
                           ["step", "loss", "mean_margin", "pref_accuracy"],
                           rows, args.format)
    write_manifest(out, "train-dpo", vars(args),
                   [p for p in (args.config, args.corpus, args.init) if p],
                   [ckpt] + outputs)
    return EXIT_OK


def cmd_train(args) -> int:
    stage = args.stage
    if stage.startswith("align-"):
        return _train_align_stage(args, {"align-1": "I", "align-2": "II",
                                         "align-3": "III"}[stage])
    if stage in ("decoder-nar", "decoder-ar"):
        return _train_decoder_stage(args, stage.split("-", 1)[1])
    return _train_dpo(args)


# ---------------------------------------------------------------------------
# eval


def _generate_units(decoder: SpeechDecoder, cond):
    if decoder.config.mode == "nar":
        return decoder.nar_generate(cond)
    return decoder.ar_generate(cond)


def _eval_uer(args, out):
    decoder = load_speech_decoder(args.checkpoint)
    records = load_corpus(args.corpus, ("supervised_units",))
    scores = evaluate_uer(decoder, records)
    rows = [[key, f"{val:.4f}"] for key, val in sorted(scores.items())]
    return write_report(out, "uer", ["group", "uer"], rows, args.format)


def _eval_emotion_acc(args, out):
    decoder = load_speech_decoder(args.checkpoint)
    records = load_corpus(args.corpus, ("supervised_units",))
    buckets = {}
    for rec in records:
        cond = decode_f32(rec["features"])
        if not feasible(decoder, rec, cond.shape[0]):
            continue
        pred = emotion_oracle_classify(_generate_units(decoder, cond).units)
        hit = int(pred == rec["emotion"])
        for key in ("overall", f"lang={rec['lang']}",
                    f"emotion={rec['emotion']}"):
            buckets.setdefault(key, []).append(hit)
    rows = [[key, len(vals), f"{np.mean(vals):.4f}"]
            for key, vals in sorted(buckets.items())]
    return write_report(out, "emotion_acc", ["group", "n", "accuracy"],
                        rows, args.format)


def _eval_pref_acc(args, out):
    decoder = load_speech_decoder(args.checkpoint)
    records = load_corpus(args.corpus, ("preference",))
    pairs = pairs_from_records(records)
    by_lang = {}
    for pair in pairs:
        by_lang.setdefault(pair.lang, []).append(pair)
    rows = [["overall", len(pairs),
             f"{preference_accuracy(decoder, pairs):.4f}"]]
    for lang, group in sorted(by_lang.items()):
        rows.append([f"lang={lang}", len(group),
                     f"{preference_accuracy(decoder, group):.4f}"])
    return write_report(out, "pref_acc", ["group", "n", "accuracy"],
                        rows, args.format)


def _eval_zero_shot(args, out):
    model, _ = load_align_model(args.checkpoint)
    records = load_corpus(args.corpus, ("instruct",))
    if not all("q_speech" in rec for rec in records):
        raise KindMismatchError("zero-shot eval needs a probe corpus with "
                                "spoken question twins")
    probe = al.quasi_zero_shot_probe(model, records)
    rows = [["similarity", f"{probe.similarity:.4f}"],
            ["text_accuracy", f"{probe.text_accuracy:.4f}"],
            ["speech_accuracy", f"{probe.speech_accuracy:.4f}"]]
    return write_report(out, "zero_shot", ["metric", "value"], rows,
                        args.format)


def _eval_partition_check(args, out):
    cfg = load_config(args)
    frames = cfg.pop("t", 2)
    vocab = cfg.pop("v", 2)
    lp = np.full((frames, vocab), -np.log(vocab))
    total = float(sum(np.exp(v) for v in brute_force_marginals(lp).values()))
    rows = [["frames", frames], ["vocab", vocab],
            ["total_probability", f"{total:.8f}"]]
    return write_report(out, "partition_check", ["field", "value"], rows,
                        args.format)


def cmd_eval(args) -> int:
    out = ensure_out(args)
    handler = {
        "uer": _eval_uer,
        "emotion-acc": _eval_emotion_acc,
        "pref-acc": _eval_pref_acc,
        "zero-shot": _eval_zero_shot,
        "partition-check": _eval_partition_check,
    }[args.metric]
    outputs = handler(args, out)
    inputs = [p for p in (args.config, args.corpus, args.checkpoint) if p]
    write_manifest(out, f"eval-{args.metric}", vars(args), inputs, outputs)
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench-latency


def cmd_bench_latency(args) -> int:
    out = ensure_out(args)
    ar = load_speech_decoder(args.checkpoint_ar)
    nar = load_speech_decoder(args.checkpoint_nar)
    if ar.config.mode != "ar" or nar.config.mode != "nar":
        raise KindMismatchError("bench-latency needs one AR and one NAR "
                                "checkpoint, in that order")
    records = load_corpus(args.corpus, ("supervised_units",))
    rows = []
    ratios = []
    for rec in records:
        cond = decode_f32(rec["features"])
        if not (feasible(ar, rec, cond.shape[0])
                and feasible(nar, rec, cond.shape[0])):
            continue
        t0 = time.perf_counter()
        ar_result = ar.ar_generate(cond)
        t1 = time.perf_counter()
        nar_result = nar.nar_generate(cond)
        t2 = time.perf_counter()
        ratio = ar_result.sequential_steps / nar_result.sequential_steps
        ratios.append(ratio)
        log.info("context %s wall-clock: ar %.4fs nar %.4fs",
                 rec["id"], t1 - t0, t2 - t1)
        rows.append([rec["id"], len(rec["units"]), ar_result.sequential_steps,
                     nar_result.sequential_steps, f"{ratio:.2f}"])
    rows.append(["median", "", "", "", f"{np.median(ratios):.2f}"])
    outputs = write_report(out, "latency",
                           ["context", "ref_len", "ar_steps", "nar_steps",
                            "step_ratio"], rows, args.format)
    write_manifest(out, "bench-latency", vars(args),
                   [args.checkpoint_ar, args.checkpoint_nar, args.corpus],
                   outputs)
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablate


def _ablate_cell(payload):
    """One grid cell: train from a derived seed, report UER by language.

    Top-level so worker processes can pickle it; each cell re-reads the
    corpus and owns its own files.
    """
    corpus_path, cfg_dict, sched_dict, cell, index = payload
    try:
        records = read_jsonl(corpus_path)
        cfg_kw = dict(cfg_dict)
        cfg_kw.update(experts=cell["experts"], layers=cell["layers"],
                      tgm=cell["tgm"], seed=cfg_dict["seed"] ^ index)
        sched_kw = dict(sched_dict)
        sched_kw["seed"] = sched_dict["seed"] ^ index
        decoder, curve = train_decoder(records,
                                       SpeechDecoderConfig(**cfg_kw),
                                       TrainSchedule(**sched_kw))
        scores = evaluate_uer(decoder, records)
        first, final = curve[0][1], curve[-1][1]
        return {
            "cell": cell,
            "final_loss": final,
            "converged": bool(np.isfinite(final) and final < first),
            "uer": scores,
            "error": None,
        }
    except Exception as exc:  # cell failure must not kill the grid
        return {"cell": cell, "final_loss": None, "converged": False,
                "uer": {}, "error": f"{type(exc).__name__}: {exc}"}


def cmd_ablate(args) -> int:
    out = ensure_out(args)
    cfg = load_config(args)

    def grid_values(key, default, cast):
        raw = cfg.pop(key, default)
        return [cast(v) for v in str(raw).split(",")]

    experts_axis = grid_values("grid_experts", "1,2,4", int)
    layers_axis = grid_values("grid_layers", "2", int)
    tgm_axis = [v in ("on", "true", "True") for v in
                grid_values("grid_tgm", "on", str)]
    cells = [{"experts": e, "layers": l, "tgm": t}
             for e in experts_axis for l in layers_axis for t in tgm_axis]
    if not cells:
        raise ConfigurationError("empty ablation grid")

    sched_kw = _take(cfg, {"lr": "lr", "steps": "steps", "batch": "batch",
                           "warmup": "warmup_ratio",
                           "weight_decay": "weight_decay"})
    sched_kw["seed"] = cfg.get("seed", 0)
    base_cfg = asdict(_decoder_config(cfg, "nar"))
    sched = asdict(TrainSchedule(**sched_kw))
    _require(args.corpus, "corpus")
    payloads = [(args.corpus, base_cfg, sched, cell, i)
                for i, cell in enumerate(cells)]

    if args.workers and args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_ablate_cell, payloads))
    else:
        results = [_ablate_cell(p) for p in payloads]

    rows = []
    for res in results:
        cell = res["cell"]
        rows.append([
            cell["experts"], cell["layers"], "on" if cell["tgm"] else "off",
            "" if res["final_loss"] is None else f"{res['final_loss']:.4f}",
            "yes" if res["converged"] else "no",
            f"{res['uer'].get('a', float('nan')):.4f}" if res["uer"] else "",
            f"{res['uer'].get('b', float('nan')):.4f}" if res["uer"] else "",
            res["error"] or "",
        ])
    outputs = write_report(out, "ablation",
                           ["experts", "layers", "tgm", "final_loss",
                            "converged", "uer_a", "uer_b", "error"],
                           rows, args.format)
    write_manifest(out, "ablate", vars(args),
                   [p for p in (args.config, args.corpus) if p], outputs)
    if all(res["error"] for res in results):
        raise UnitforgeError("all ablation cells failed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# decode


def cmd_decode(args) -> int:
    out = ensure_out(args)
    decoder = load_speech_decoder(args.checkpoint)
    records = load_corpus(args.contexts)
    results = []
    for rec in records:
        result = _generate_units(decoder, decode_f32(rec["features"]))
        results.append({
            "schema": 1,
            "id": rec["id"],
            "kind": "decoded_units",
            "units": list(result.units),
            "sequential_steps": result.sequential_steps,
            "truncated": result.truncated,
        })
    path = os.path.join(out, "decoded.jsonl")
    write_jsonl(path, results)
    write_manifest(out, "decode", vars(args),
                   [args.checkpoint, args.contexts], [path])
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def _add_common(parser):
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--config", default=None)
    parser.add_argument("--out", default=None)
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--format", choices=("csv", "text"), default="csv")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unitforge",
        description="Synthetic speech-unit generation stack",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    _add_common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("stage", choices=("align-1", "align-2", "align-3",
                                     "decoder-nar", "decoder-ar", "dpo"))
    p.add_argument("--corpus", required=True)
    p.add_argument("--init", default=None,
                   help="checkpoint from the prerequisite stage")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("metric", choices=("uer", "emotion-acc", "pref-acc",
                                      "zero-shot", "partition-check"))
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--corpus", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench-latency", help="AR vs NAR step-count benchmark")
    p.add_argument("--checkpoint-ar", required=True)
    p.add_argument("--checkpoint-nar", required=True)
    p.add_argument("--corpus", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_bench_latency)

    p = sub.add_parser("ablate", help="experts/layers/tgm grid")
    p.add_argument("--corpus", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("decode", help="checkpoint + contexts to unit JSONL")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--contexts", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_decode)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("UNITFORGE_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        log.error("%s", exc)
        return EXIT_MISSING_INPUT
    except (ConfigurationError, DataError) as exc:
        log.error("%s", exc)
        return EXIT_INVALID_SPEC
    except SequencingError as exc:
        log.error("%s", exc)
        return EXIT_SEQUENCING
    except KindMismatchError as exc:
        log.error("%s", exc)
        return EXIT_KIND_MISMATCH
    except UnitforgeError as exc:
        log.error("%s", exc)
        return 1
    finally:
        T.reset_tape()


if __name__ == "__main__":
    sys.exit(main())
