"""``miaguard`` command line.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .errors import ConfigurationError, InputError, MiaGuardError
from .metrics import summarize

log = logging.getLogger("miaguard")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _write_jsonl(path: Path, rows) -> None:
    from .harness import _atomic_write

    path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))


def _experiment_parts(args):
    from .harness import load_config

    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        from dataclasses import replace

        cfg = replace(cfg, seed=args.seed)
    return cfg


def _arm(cfg, name):
    from .harness import DefenseArm

    if name == "none":
        return DefenseArm("none")
    for a in cfg.defenses:
        if a.name == name:
            return a
    raise ConfigurationError(f"no defense arm named {name!r} in the config")


def cmd_attack(args) -> int:
    """Score every record with every enabled attack against one arm."""
    from dataclasses import replace

    from .harness import run_experiment

    cfg = _experiment_parts(args)
    arm = _arm(cfg, args.arm)
    cfg = replace(cfg, defenses=() if arm.name == "none" else (arm,))
    report = run_experiment(cfg)
    status = {a["name"]: a for a in report.body["arms"]}[arm.name]
    if status["status"] != "ok":
        raise MiaGuardError(f"arm {arm.name} failed: {status['error']}")
    rows = [{"id": s.sample_id, "label": s.label, "attack": attack, "arm": arm.name,
             "score": s.score.value, "approximate": s.score.approximate, "flags": list(s.score.flags)}
            for attack, scored in report.scores[arm.name].items() for s in scored]
    _write_jsonl(Path(args.out), rows)
    print(f"wrote {len(rows)} scores to {args.out} (fingerprint {report.fingerprint[:12]})")
    return EXIT_OK


def cmd_defend(args) -> int:
    """Answer every question through one defense arm."""
    from .defenses import DefendedModel, GenerationConfig
    from .harness import resolve_endpoint
    from .testbed import TestbedConfig, build_testbed
    from .utils import derive_seed

    cfg = _experiment_parts(args)
    arm = _arm(cfg, args.arm)
    from .harness import load_dataset

    testbed = build_testbed(TestbedConfig(**dict(cfg.testbed))) if cfg.testbed is not None else None
    records = load_dataset(cfg.dataset) if cfg.dataset else testbed.records()
    defaults = {"target": "target", "base": "base"} if testbed is not None else {}
    ep = {}
    for role in ("target", "base"):
        spec = cfg.endpoints.get(role) or ({"testbed": defaults[role]} if role in defaults else None)
        ep[role] = resolve_endpoint(spec, role, testbed)
    judge = resolve_endpoint(cfg.endpoints.get("judge", "mock-judge"), "judge", testbed)
    system = DefendedModel(ep["target"], arm.chain(), base=ep["base"], judge=judge,
                           gen=GenerationConfig(cfg.max_tokens, cfg.temperature), seed=cfg.seed)
    rows = []
    for r in sorted(records, key=lambda r: r.id):
        resp = system.respond(r.question, seed=derive_seed(cfg.seed, r.id))
        row = {"id": r.id, "question": r.question, "answer": resp.answer.text,
               "mean_loss": resp.answer.mean_loss, "arm": arm.name}
        if resp.verdict is not None:
            row["fallback_used"] = resp.verdict.fallback_used
        if resp.bundle is not None:
            row["target_answer"] = resp.bundle.target_answer.text
            row["base_answer"] = resp.bundle.base_answer.text
        rows.append(row)
    _write_jsonl(Path(args.out), rows)
    if arm.chain().adaptive is not None:
        print(json.dumps(system.ledger.summary(cfg.delta), sort_keys=True))
    print(f"wrote {len(rows)} answers to {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    """AUC / ASR / TPR@FPR per (arm, attack) from a scores file."""
    groups: dict[tuple[str, str], tuple[list, list]] = {}
    path = Path(args.scores)
    if not path.is_file():
        raise InputError(f"{path}: no such file")
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                key = (row.get("arm", "none"), row["attack"])
                scores, labels = groups.setdefault(key, ([], []))
                scores.append(float(row["score"]))
                labels.append(int(row["label"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise InputError(f"{path}:{lineno}: bad score row ({e})") from e
    fprs = tuple(args.fpr) if args.fpr else (0.01,)
    out = []
    for (arm, attack), (scores, labels) in sorted(groups.items()):
        s = summarize(scores, labels, fprs)
        out.append({"arm": arm, "attack": attack, "auc": s.auc, "asr": s.asr,
                    **{f"tpr@{f:g}": v for f, v in s.tpr_at.items()}, "n": len(scores)})
    text = json.dumps(out, indent=2, sort_keys=True) + "\n"
    if args.out:
        from .harness import _atomic_write

        _atomic_write(Path(args.out), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_run(args) -> int:
    """Full experiment: every arm, then report files."""
    from .harness import emit_report, run_experiment

    cfg = _experiment_parts(args)
    out_dir = args.out_dir or cfg.output_dir
    report = run_experiment(cfg)
    paths = emit_report(report, out_dir)
    sys.stdout.write(Path(paths[1]).read_text(encoding="utf-8") if len(paths) > 1 else "")
    for p in paths:
        print(f"wrote {p}")
    failed = [a["name"] for a in report.body["arms"] if a["status"] != "ok"]
    if failed:
        print(f"failed arms: {', '.join(failed)}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_report(args) -> int:
    """Re-render an existing structured report."""
    from .harness import emit_report, load_report, render_table

    report = load_report(args.report)
    if args.out_dir:
        for p in emit_report(report, args.out_dir, args.formats or ("structured", "table-text", "plot-data")):
            print(f"wrote {p}")
    else:
        sys.stdout.write(render_table(report))
    return EXIT_OK


def cmd_serve_mock(args) -> int:
    """Serve testbed (or corpus-fitted) toy models until interrupted."""
    from .model_access import MockJudge, fit_toy_lm
    from .server import serve_mock
    from .testbed import TestbedConfig, build_testbed

    if args.corpus:
        lines = [l for l in Path(args.corpus).read_text(encoding="utf-8").splitlines() if l.strip()]
        if not lines:
            raise InputError(f"{args.corpus}: empty corpus")
        models = {args.model: fit_toy_lm(lines, args.order, args.smoothing, args.tokenizer, name=args.model)}
    else:
        params = {}
        if args.config:
            params = dict(_experiment_parts(args).testbed or {})
        tb = build_testbed(TestbedConfig(**params))
        models = {"target": tb.target, "base": tb.base, "reference": tb.reference}
    models["mock-judge"] = MockJudge()
    token = os.environ.get("MIAGUARD_SERVER_TOKEN")
    server = serve_mock(models, args.host, args.port, auth_token=token, background=False)
    print(f"serving {', '.join(sorted(models))} at {server.url}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.httpd.server_close()
    return EXIT_OK


def cmd_index(args) -> int:
    """Embed a passage file and write a retrieval index."""
    from .harness import load_passages
    from .retrieval import HashingEmbedder, RemoteEmbedder, build_index

    passages = load_passages(args.corpus)
    if args.embedding_url:
        provider = RemoteEmbedder(args.embedding_url, args.embedding_model,
                                  os.environ.get("MIAGUARD_EMBEDDING_TOKEN"))
    else:
        provider = HashingEmbedder(args.dim)
    index = build_index(provider, passages)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    index.save(args.out)
    print(f"indexed {len(index)} passages (d={index.dim}) into {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="miaguard", description="Membership-inference red-teaming and inference-time defenses.")
    p.add_argument("--version", action="version", version=f"miaguard {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp, required=True):
        sp.add_argument("-c", "--config", required=required, help="experiment config (YAML)")
        sp.add_argument("--seed", type=int, help="override the master seed")

    sp = sub.add_parser("attack", help="run the attack suite over a dataset")
    with_config(sp)
    sp.add_argument("--arm", default="none", help="defense arm to attack (default: none)")
    sp.add_argument("-o", "--out", default="scores.jsonl")
    sp.set_defaults(fn=cmd_attack)

    sp = sub.add_parser("defend", help="generate answers through a defense chain")
    with_config(sp)
    sp.add_argument("--arm", required=True)
    sp.add_argument("-o", "--out", default="answers.jsonl")
    sp.set_defaults(fn=cmd_defend)

    sp = sub.add_parser("evaluate", help="metrics from a scores file")
    sp.add_argument("scores")
    sp.add_argument("--fpr", type=float, action="append")
    sp.add_argument("-o", "--out")
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("run", help="full experiment with report files")
    with_config(sp)
    sp.add_argument("-o", "--out-dir")
    sp.set_defaults(fn=cmd_run)

    sp = sub.add_parser("report", help="render a structured report")
    sp.add_argument("report")
    sp.add_argument("-o", "--out-dir")
    sp.add_argument("--format", dest="formats", action="append",
                    choices=("structured", "table-text", "plot-data"))
    sp.set_defaults(fn=cmd_report)

    sp = sub.add_parser("serve-mock", help="serve toy models over the completion protocol")
    with_config(sp, required=False)
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=8000)
    sp.add_argument("--corpus", help="fit a single toy model on this text file instead of the testbed")
    sp.add_argument("--model", default="toy")
    sp.add_argument("--order", type=int, default=3)
    sp.add_argument("--smoothing", type=float, default=0.1)
    sp.add_argument("--tokenizer", choices=("whitespace", "byte"), default="whitespace")
    sp.set_defaults(fn=cmd_serve_mock)

    sp = sub.add_parser("index", help="build a retrieval index")
    sp.add_argument("corpus", help="JSONL with id/text, or plain text one passage per line")
    sp.add_argument("-o", "--out", default="index.bin")
    sp.add_argument("--dim", type=int, default=256)
    sp.add_argument("--embedding-url")
    sp.add_argument("--embedding-model", default="embedding")
    sp.set_defaults(fn=cmd_index)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"miaguard: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigurationError, UsageError) as e:
        print(f"miaguard: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (MiaGuardError, OSError) as e:
        print(f"miaguard: failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
