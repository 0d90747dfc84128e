"""Command-line entry point: ``langtraj <command> [options]``.

Commands: synth, annotate, train, eval, predict, edit, trace.  Every
command writes the fully resolved configuration (``run_config.json``) and
the checksums of its inputs (``inputs.json``) into its output directory.
Set ``LANGTRAJ_LOG=DEBUG`` (or INFO, WARNING) for more or less logging.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import copy
import json
import logging
import os
import sys
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import annotate as ann
from . import dataio, evaluate, synth
from . import diffcore as dc
from .model import ConfigError, ModelConfig, TrajectoryModel
from .train import Optimizers, TrainConfig, train

log = logging.getLogger("langtraj")

COMMANDS = ("synth", "annotate", "train", "eval", "predict", "edit", "trace")


# -- configuration -------------------------------------------------------------------


def default_config() -> dict:
    return {
        "seed": 0,
        "synth": {"scripts": ["all"], "n": 10, "jitter": 0.05, "translate": 50.0, "rotate": False},
        "example": dataio.ExampleConfig().__dict__.copy(),
        "annotate": ann.AnnotateConfig().to_dict(),
        "model": ModelConfig().to_dict(),
        "train": TrainConfig().to_dict(),
        "eval": {"n_samples": 6, "horizons": [1.0, 3.0], "batch_size": 32, "info_gain": False},
        "workers": 1,
    }


def _merge(base: dict, new: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in new.items():
        key = f"{prefix}{k}"
        if k not in base:
            raise ConfigError(f"unknown configuration key {key!r}", key)
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"configuration key {key!r} must be an object", key)
            out[k] = _merge(base[k], v, key + ".")
        else:
            out[k] = v
    return out


def resolve_config(path: Optional[str], seed: Optional[int] = None) -> dict:
    """Defaults, overlaid by the JSON file at ``path``, then by ``--seed``.

    Every section is validated before any work starts; errors name the key.
    """
    cfg = default_config()
    if path:
        with open(path, "r", encoding="utf-8") as f:
            try:
                user = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}:{e.lineno}: invalid JSON ({e.msg})", "config") from e
        if not isinstance(user, dict):
            raise ConfigError("configuration file must hold a JSON object", "config")
        cfg = _merge(cfg, user)
    if seed is not None:
        cfg["seed"] = seed
    cfg["train"]["seed"] = cfg["seed"]
    for section, ctor in (("model", ModelConfig.from_dict), ("train", TrainConfig.from_dict),
                          ("annotate", ann.AnnotateConfig.from_dict)):
        try:
            ctor(cfg[section])
        except ConfigError as e:
            raise ConfigError(str(e), f"{section}.{e.key}") from e
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{section}: {e}", section) from e
    try:
        dataio.ExampleConfig(**cfg["example"])
    except (TypeError, ValueError) as e:
        raise ConfigError(f"example: {e}", "example") from e
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer", "seed")
    if not isinstance(cfg["workers"], int) or cfg["workers"] < 1:
        raise ConfigError("workers must be a positive integer", "workers")
    ev = cfg["eval"]
    if not isinstance(ev["n_samples"], int) or ev["n_samples"] < 2:
        raise ConfigError("eval.n_samples must be an integer >= 2", "eval.n_samples")
    return cfg


def _write_json(path: str, obj) -> str:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _input_checksums(paths: Sequence[str]) -> Dict[str, str]:
    out = {}
    for p in paths:
        if os.path.isdir(p):
            for root, _, files in os.walk(p):
                for name in sorted(files):
                    fp = os.path.join(root, name)
                    out[os.path.relpath(fp, os.path.dirname(p.rstrip(os.sep)) or ".")] = dataio.sha256_file(fp)
        elif os.path.exists(p):
            out[os.path.basename(p)] = dataio.sha256_file(p)
    return dict(sorted(out.items()))


def _prepare_out(out: str, cfg: dict, command: str, inputs: Sequence[str]) -> None:
    os.makedirs(out, exist_ok=True)
    _write_json(os.path.join(out, "run_config.json"), {"command": command, **cfg})
    _write_json(os.path.join(out, "inputs.json"), _input_checksums(inputs))


def _load_examples(path: str) -> List[dataio.PredictionExample]:
    return dataio.read_shards(path, verify=True)


def _load_model(path: str) -> TrajectoryModel:
    model, _, _ = TrajectoryModel.load(path)
    return model


def _select(examples, ids: Optional[str]):
    if not ids:
        return examples
    wanted = ids.split(",")
    by_id = {e.example_id: e for e in examples}
    missing = [i for i in wanted if i not in by_id]
    if missing:
        raise KeyError(f"unknown example id(s): {', '.join(missing)}")
    return [by_id[i] for i in wanted]


# -- commands ----------------------------------------------------------------------------


def cmd_synth(args, cfg) -> int:
    sc = cfg["synth"]
    if args.script:
        sc["scripts"] = args.script.split(",")
    if args.n is not None:
        sc["n"] = args.n
    lib = {**synth.script_library(), **synth.unambiguous_library()}
    names = sorted(synth.script_library()) if sc["scripts"] == ["all"] else sc["scripts"]
    for name in names:
        if name not in lib:
            raise ConfigError(f"unknown script {name!r}", "synth.scripts")
    _prepare_out(args.out, cfg, "synth", [])
    ecfg = dataio.ExampleConfig(**cfg["example"])
    scene_dir = os.path.join(args.out, "scenes")
    os.makedirs(scene_dir, exist_ok=True)
    examples = []
    with open(os.path.join(args.out, "expected.ndjson"), "w", encoding="utf-8") as exp_f:
        for k, name in enumerate(names):
            scenes = synth.synth_scenes(lib[name], sc["n"], seed=cfg["seed"] + 1000 * k, jitter=sc["jitter"],
                                        translate=sc["translate"], rotate=sc["rotate"])
            for scene, mp, expected in scenes:
                with open(os.path.join(scene_dir, scene.scene_id + ".csv"), "wb") as f:
                    f.write(dataio.serialize_scene_csv(scene))
                with open(os.path.join(scene_dir, scene.scene_id + ".map.json"), "wb") as f:
                    f.write(dataio.serialize_map(mp))
                exp_f.write(json.dumps({"scene_id": scene.scene_id, "script": name, "target": lib[name].target,
                                        "expected_tokens": expected}) + "\n")
                examples.extend(dataio.assemble_examples(scene, mp, ecfg))
    dataio.write_shards(examples, os.path.join(args.out, "examples"))
    print(f"synth: {len(names)} script(s), {len(examples)} examples -> {args.out}")
    return 0


def _annotate_chunk(payload):
    examples, cfg_dict, seed = payload
    acfg = ann.AnnotateConfig.from_dict(cfg_dict)
    return [ann.annotate_example(ex, acfg, seed) for ex in examples]


def cmd_annotate(args, cfg) -> int:
    examples = _load_examples(args.data)
    _prepare_out(args.out, cfg, "annotate", [args.data])
    acfg = ann.AnnotateConfig.from_dict(cfg["annotate"])
    workers = cfg["workers"]
    chunks = [examples[i::workers] for i in range(workers)] if workers > 1 else [examples]
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(workers) as pool:
            parts = list(pool.map(_annotate_chunk, [(c, cfg["annotate"], cfg["seed"]) for c in chunks]))
        by_id = {a.example_id: a for part in parts for a in part}
        results = [by_id[ex.example_id] for ex in examples]
    else:
        results = _annotate_chunk((examples, cfg["annotate"], cfg["seed"]))
    stats: Dict[str, int] = {"total": len(results), "captioned": 0}
    with open(os.path.join(args.out, "captions.ndjson"), "w", encoding="utf-8") as f:
        for ex, a in zip(examples, results):
            f.write(json.dumps(a.to_record(acfg.checksum()), sort_keys=True) + "\n")
            ex.caption = None if a.rejected else list(a.caption.tokens)
            if a.rejected:
                stats[f"rejected_{a.reason}"] = stats.get(f"rejected_{a.reason}", 0) + 1
            else:
                stats["captioned"] += 1
    _write_json(os.path.join(args.out, "stats.json"), stats)
    hist = evaluate.token_distribution([ex.caption for ex in examples if ex.caption is not None], [])
    evaluate.write_histogram_csv(hist, os.path.join(args.out, "token_histogram.csv"))
    dataio.write_shards(examples, os.path.join(args.out, "examples"))
    print(f"annotate: {stats['captioned']}/{stats['total']} captioned -> {args.out}")
    return 0


def cmd_train(args, cfg) -> int:
    examples = _load_examples(args.data)
    _prepare_out(args.out, cfg, "train", [args.data])
    mcfg = ModelConfig.from_dict(cfg["model"])
    tcfg = TrainConfig.from_dict(cfg["train"])
    opt = None
    if args.resume:
        model, _, st = TrajectoryModel.load(args.resume)
        opt = Optimizers.split(st) if st is not None else None
    else:
        model = TrajectoryModel(mcfg, seed=cfg["seed"])
    records = train(model, examples, tcfg, out_dir=args.out, opt=opt)
    last = records[-1] if records else {}
    print(f"train: {len(records)} steps, final mon {last.get('mon', float('nan')):.4f} -> {args.out}")
    return 0


def _eval_chunk(payload):
    ckpt, examples, ev, seed = payload
    model = _load_model(ckpt)
    return evaluate.evaluate(model, examples, ev["n_samples"], seed, tuple(ev["horizons"]), ev["batch_size"], ev["info_gain"])


def cmd_eval(args, cfg) -> int:
    examples = _select(_load_examples(args.data), args.example)
    _prepare_out(args.out, cfg, "eval", [args.checkpoint, args.data])
    ev = cfg["eval"]
    workers = cfg["workers"]
    if workers > 1 and len(examples) > 1:
        size = -(-len(examples) // workers)
        chunks = [examples[i: i + size] for i in range(0, len(examples), size)]
        with concurrent.futures.ProcessPoolExecutor(workers) as pool:
            parts = list(pool.map(_eval_chunk, [(args.checkpoint, c, ev, cfg["seed"]) for c in chunks]))
        report = evaluate.merge_reports(parts, ev["n_samples"], cfg["seed"], tuple(ev["horizons"]), ev["info_gain"])
    else:
        report = _eval_chunk((args.checkpoint, examples, ev, cfg["seed"]))
    report.write(args.out)
    agg = report.aggregate
    print("eval: " + ", ".join(f"{k}={v:.4f}" for k, v in sorted(agg.items()) if isinstance(v, float)))
    return 0


def cmd_predict(args, cfg) -> int:
    examples = _select(_load_examples(args.data), args.example)
    _prepare_out(args.out, cfg, "predict", [args.checkpoint, args.data])
    model = _load_model(args.checkpoint)
    n = cfg["eval"]["n_samples"]
    bs = cfg["eval"]["batch_size"]
    with open(os.path.join(args.out, "predictions.ndjson"), "w", encoding="utf-8") as f:
        for s in range(0, len(examples), bs):
            chunk = examples[s: s + bs]
            _, res = evaluate.sample_futures(model, chunk, n, cfg["seed"])
            for b, ex in enumerate(chunk):
                rec = {"example_id": ex.example_id,
                       "samples": res.positions.data[b, :, 0].tolist()}
                if res.tokens is not None:
                    rec["captions"] = [ann.token_names(res.tokens[b, k, 0]) for k in range(n)]
                    rec["best_sample"] = evaluate.best_caption_index(res, b, n)
                f.write(json.dumps(rec) + "\n")
    print(f"predict: {len(examples)} examples x {n} samples -> {args.out}")
    return 0


def _parse_swaps(spec: str):
    swaps = []
    for part in spec.split(","):
        if ":" not in part:
            raise ConfigError(f"--swap expects OLD:NEW pairs, got {part!r}", "swap")
        a, b = part.split(":", 1)
        try:
            swaps.append((ann.token_id(a), ann.token_id(b)))
        except (KeyError, ValueError) as e:
            raise ConfigError(f"--swap: {e}", "swap") from e
    return swaps


def edit_caption(tokens: Sequence[int], swaps) -> List[int]:
    """Apply token substitutions; ``A:B`` also turns ``B`` into ``A`` (a swap)."""
    out = []
    for t in tokens:
        new = t
        for a, b in swaps:
            if t == a:
                new = b
            elif t == b:
                new = a
        out.append(new)
    ann.Caption(out, len(out))  # validate
    return out


def cmd_edit(args, cfg) -> int:
    examples = _select(_load_examples(args.data), args.example)
    if len(examples) != 1:
        raise ConfigError("edit needs exactly one --example", "example")
    swaps = _parse_swaps(args.swap)
    _prepare_out(args.out, cfg, "edit", [args.checkpoint, args.data])
    model = _load_model(args.checkpoint)
    ex = examples[0]
    n = cfg["eval"]["n_samples"]
    res = edit_rollout(model, ex, swaps, n, cfg["seed"], caption=args.caption)
    _write_json(os.path.join(args.out, "edit.json"), res)
    print(f"edit: {ann.token_names(ann.content_tokens(res['original_caption']))} -> "
          f"{ann.token_names(ann.content_tokens(res['edited_caption']))}; "
          f"lateral {res['original_lateral']:+.3f} m -> {res['edited_lateral']:+.3f} m")
    return 0


def edit_rollout(model: TrajectoryModel, ex, swaps, n: int, seed: int, caption: Optional[str] = None) -> dict:
    """Decode ``ex`` with its stored (or given) caption and with the edited one.

    The stored rollout is the highest-likelihood sample; both decodes reuse
    its noise so only the caption differs.
    """
    batch, res = evaluate.sample_futures(model, [ex], n, seed)
    if res.tokens is None:
        raise ConfigError("edit needs a decoder that reads captions (decoder 'ours')", "model.decoder")
    k = evaluate.best_caption_index(res, 0, n)
    if caption:
        orig = ann.Caption.from_content(caption.split(","), model.cfg.max_len).tokens
    else:
        orig = res.tokens[0, k, 0].tolist()
    edited = edit_caption(orig, swaps)
    A = batch.agent_mask.shape[1]
    out = {"example_id": ex.example_id, "sample": k, "original_caption": orig, "edited_caption": edited}
    for key, cap in (("original", orig), ("edited", edited)):
        ov = np.full((1, A, model.cfg.max_len), ann.PAD, dtype=np.int64)
        ov[0, 0] = cap
        om = np.zeros((1, A), bool)
        om[0, 0] = True
        _, r = evaluate.sample_futures(model, [ex], n, seed, caption_override=ov, override_mask=om)
        traj = r.positions.data[0, k, 0]
        out[f"{key}_trajectory"] = traj.tolist()
        out[f"{key}_lateral"] = evaluate.net_lateral_displacement(batch.origin[0, 0], batch.last_disp[0, 0], traj)
    return out


def cmd_trace(args, cfg) -> int:
    examples = _select(_load_examples(args.data), args.example)
    _prepare_out(args.out, cfg, "trace", [args.checkpoint, args.data])
    model = _load_model(args.checkpoint)
    n = cfg["eval"]["n_samples"]
    reports = []
    for s in range(0, len(examples), cfg["eval"]["batch_size"]):
        chunk = examples[s: s + cfg["eval"]["batch_size"]]
        _, res = evaluate.sample_futures(model, chunk, n, cfg["seed"])
        if res.tokens is None:
            reports.extend({"example_id": e.example_id, "empty": True, "reason": "decoder has no token attention"} for e in chunk)
            continue
        best = [evaluate.best_caption_index(res, b, n) for b in range(len(chunk))]
        reports.extend(evaluate.attention_trace_report(evaluate.traces_for(chunk, res, res.trace, n, samples=best)))
    with open(os.path.join(args.out, "attention.ndjson"), "w", encoding="utf-8") as f:
        for r in reports:
            f.write(json.dumps(r, sort_keys=True) + "\n")
    evaluate.write_attention_csv(reports, os.path.join(args.out, "attention.csv"))
    print(f"trace: {len(reports)} reports -> {args.out}")
    return 0


# -- entry point ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="langtraj", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def common(sp, data=True, ckpt=False):
        sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--seed", type=int, help="overrides the configured seed")
        sp.add_argument("--out", required=True, help="output directory")
        if data:
            sp.add_argument("--data", required=True, help="example shard directory")
        if ckpt:
            sp.add_argument("--checkpoint", required=True, help="model checkpoint")
        return sp

    sp = common(sub.add_parser("synth", help="generate scripted scenes"), data=False)
    sp.add_argument("--script", help="script name(s), comma separated")
    sp.add_argument("--n", type=int, help="scenes per script")
    common(sub.add_parser("annotate", help="caption examples"))
    sp = common(sub.add_parser("train", help="train a model"))
    sp.add_argument("--resume", help="checkpoint to continue from")
    for name, helptext in (("eval", "evaluate a model"), ("predict", "sample futures"), ("trace", "attention reports")):
        sp = common(sub.add_parser(name, help=helptext), ckpt=True)
        sp.add_argument("--example", help="example id(s), comma separated")
    sp = common(sub.add_parser("edit", help="re-decode with substituted tokens"), ckpt=True)
    sp.add_argument("--example", required=True, help="example id")
    sp.add_argument("--swap", required=True, help="OLD:NEW token pairs, comma separated")
    sp.add_argument("--caption", help="content tokens to edit instead of the stored rollout, comma separated")
    return p


HANDLERS = {
    "synth": cmd_synth, "annotate": cmd_annotate, "train": cmd_train, "eval": cmd_eval,
    "predict": cmd_predict, "edit": cmd_edit, "trace": cmd_trace,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=os.environ.get("LANGTRAJ_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args.config, args.seed)
        return HANDLERS[args.command](args, cfg)
    except ConfigError as e:
        print(f"configuration error [{e.key}]: {e}", file=sys.stderr)
        return 1
    except dataio.FormatError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 1
    except (KeyError, FileNotFoundError, ValueError, dc.TrainingDivergenceError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
