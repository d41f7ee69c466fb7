"""Experiment orchestration: datasets, configuration, arms, reports."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Mapping, Sequence

import yaml

from . import __version__
from .attacks import ATTACKS, ZLIB_LEVEL, AttackConfig, AttackSample, run_attack_suite
from .defenses import DefendedModel, DefenseChain, GenerationConfig, NoiseParams
from .errors import ConfigurationError, InputError, MiaGuardError
from .judge_analysis import bias_report, categorize
from .metrics import exact_match, format_cell, relative_change, summarize, token_f1
from .model_access import Endpoint, MockJudge, RemoteModel, connect, join_prompt
from .retrieval import HashingEmbedder, RagModel, RemoteEmbedder, build_index
from .testbed import TestbedConfig, build_testbed
from .utils import derive_seed

MEMBERSHIP = ("member", "nonmember")
RECORD_FIELDS = ("id", "question", "context", "answer", "membership")
MODES = ("sft-style", "rag-style")
SURFACES = ("response", "document")
ROLES = ("target", "base", "judge", "reference", "embedding")
METRICS = ("auc", "asr")


# -- datasets ----------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetRecord:
    id: str
    question: str
    context: str | None
    answer: str
    membership: str

    @property
    def label(self) -> int:
        return int(self.membership == "member")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in RECORD_FIELDS}


def _record_from(obj: Any, where: str) -> DatasetRecord:
    if not isinstance(obj, dict):
        raise InputError(f"{where}: expected an object")
    for name in ("id", "question", "answer", "membership"):
        if name not in obj:
            raise InputError(f"{where}: missing field {name!r}")
        if not isinstance(obj[name], str):
            raise InputError(f"{where}: field {name!r} must be a string")
    if obj.get("context") is not None and not isinstance(obj["context"], str):
        raise InputError(f"{where}: field 'context' must be a string or null")
    if obj["membership"] not in MEMBERSHIP:
        raise InputError(f"{where}: field 'membership' must be one of {MEMBERSHIP}")
    extra = set(obj) - set(RECORD_FIELDS)
    if extra:
        raise InputError(f"{where}: unknown field(s) {sorted(extra)}")
    if not obj["id"]:
        raise InputError(f"{where}: field 'id' is empty")
    return DatasetRecord(obj["id"], obj["question"], obj.get("context"), obj["answer"], obj["membership"])


def load_dataset(path) -> list[DatasetRecord]:
    """One JSON object per line; blank lines are ignored."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"{path}: no such file")
    records, seen = [], set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise InputError(f"{where}: invalid JSON ({e.msg})") from e
            rec = _record_from(obj, where)
            if rec.id in seen:
                raise InputError(f"{where}: duplicate id {rec.id!r}")
            seen.add(rec.id)
            records.append(rec)
    return records


def save_dataset(records: Sequence[DatasetRecord], path) -> None:
    _atomic_write(Path(path), "".join(json.dumps(r.to_dict(), ensure_ascii=False) + "\n" for r in records))


def load_passages(path) -> list[tuple[str, str]]:
    """Retrieval corpus: JSONL with ``id``/``text`` fields, or plain text one passage per line."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"{path}: no such file")
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            if path.suffix in (".jsonl", ".json"):
                try:
                    obj = json.loads(line)
                    out.append((str(obj["id"]), str(obj["text"])))
                except (json.JSONDecodeError, KeyError, TypeError) as e:
                    raise InputError(f"{path}:{lineno}: expected an object with 'id' and 'text'") from e
            else:
                out.append((f"p{lineno:06d}", line.rstrip("\n")))
    return out


# -- configuration -----------------------------------------------------------------


@dataclass(frozen=True)
class DefenseArm:
    name: str
    epd: bool = False
    flatten: float = 0.0
    dp: float = 0.0
    adaptive: Mapping[str, Any] | None = None

    def chain(self) -> DefenseChain:
        noise = NoiseParams(**dict(self.adaptive)) if self.adaptive is not None else None
        return DefenseChain(self.name, self.epd, float(self.flatten), float(self.dp), noise)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adaptive"] = dict(self.adaptive) if self.adaptive is not None else None
        return d


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that determines an experiment's numbers.

    ``endpoints`` maps a role to one of: ``{"url", "model", "token"?, ...}`` for
    an HTTP endpoint, ``{"testbed": "target"|"base"|"reference"}`` for a
    testbed model, ``"mock-judge"``, or an already-built model object.
    """

    mode: str = "sft-style"
    surface: str = "response"
    dataset: str | None = None
    corpus: str | None = None
    testbed: Mapping[str, Any] | None = None
    endpoints: Mapping[str, Any] = field(default_factory=dict)
    attacks: tuple[str, ...] = ATTACKS
    attack_params: Mapping[str, Any] = field(default_factory=dict)
    defenses: tuple[DefenseArm, ...] = ()
    fpr_targets: tuple[float, ...] = (0.01,)
    seed: int = 0
    max_members: int | None = None
    max_nonmembers: int | None = None
    max_tokens: int = 12
    temperature: float = 0.0
    retrieval_k: int = 5
    embedding_dim: int = 256
    delta: float = 1e-5
    max_workers: int | None = None
    output_dir: str = "results"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}")
        if self.surface not in SURFACES:
            raise ConfigurationError(f"surface must be one of {SURFACES}")
        if self.dataset is None and self.testbed is None:
            raise ConfigurationError("need a dataset file or a testbed section")
        if self.mode == "rag-style" and self.corpus is None and self.testbed is None:
            raise ConfigurationError("rag-style mode requires a retrieval corpus")
        unknown = set(self.endpoints) - set(ROLES)
        if unknown:
            raise ConfigurationError(f"unknown endpoint role(s): {sorted(unknown)}")
        if self.testbed is None and "target" not in self.endpoints:
            raise ConfigurationError("a target endpoint is required")
        if "lira" in self.attacks and self.testbed is None and "reference" not in self.endpoints:
            raise ConfigurationError("lira requires a reference endpoint")
        names = [a.name for a in self.defenses]
        if "none" in names or len(set(names)) != len(names):
            raise ConfigurationError("defense arm names must be unique and not 'none'")
        needs_base = any(a.epd or a.adaptive is not None for a in self.defenses)
        if needs_base and self.testbed is None and "base" not in self.endpoints:
            raise ConfigurationError("epd/adaptive arms need a base endpoint")
        if not all(0 < f < 1 for f in self.fpr_targets):
            raise ConfigurationError("fpr targets must lie in (0, 1)")
        self.attack_config()  # validates attacks and their parameters
        for a in self.defenses:
            a.chain()

    def attack_config(self, recall_prefix: str | None = None) -> AttackConfig:
        params = dict(self.attack_params)
        if recall_prefix is not None and not params.get("recall_prefix"):
            params["recall_prefix"] = recall_prefix
        try:
            return AttackConfig(attacks=tuple(self.attacks), seed=self.seed,
                                max_workers=self.max_workers, **params)
        except TypeError as e:
            raise ConfigurationError(f"bad attack parameter: {e}") from e

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ExperimentConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config key(s): {sorted(unknown)}")
        arms = []
        for d in data.pop("defenses", None) or ():
            if not isinstance(d, Mapping) or "name" not in d:
                raise ConfigurationError("each defense needs a name")
            try:
                arms.append(DefenseArm(**d))
            except TypeError as e:
                raise ConfigurationError(f"bad defense entry {d.get('name')!r}: {e}") from e
        for key in ("attacks", "fpr_targets"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(defenses=tuple(arms), **data)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["defenses"] = [a.to_dict() for a in self.defenses]
        d["attacks"] = list(self.attacks)
        d["fpr_targets"] = list(self.fpr_targets)
        d["attack_params"] = dict(self.attack_params)
        d["testbed"] = dict(self.testbed) if self.testbed is not None else None
        d["endpoints"] = {k: _endpoint_repr(v) for k, v in sorted(self.endpoints.items())}
        return d

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")) + "|" + __version__
        return hashlib.sha256(blob.encode()).hexdigest()


def _endpoint_repr(spec) -> Any:
    if isinstance(spec, (str, int, float)) or spec is None:
        return spec
    if isinstance(spec, Mapping):
        # tokens never enter reports or fingerprints
        return {k: v for k, v in sorted(spec.items()) if k != "token"}
    if isinstance(spec, Endpoint):
        return {"url": spec.base_url, "model": spec.model}
    return f"<{type(spec).__name__}:{getattr(spec, 'name', '')}>"


def apply_env_overrides(data: dict, environ: Mapping[str, str] = os.environ) -> dict:
    """``MIAGUARD_<ROLE>_URL`` / ``MIAGUARD_<ROLE>_TOKEN`` replace endpoint fields."""
    data = dict(data)
    eps = {k: (dict(v) if isinstance(v, Mapping) else v) for k, v in (data.get("endpoints") or {}).items()}
    for role in ROLES:
        url = environ.get(f"MIAGUARD_{role.upper()}_URL")
        token = environ.get(f"MIAGUARD_{role.upper()}_TOKEN")
        if url is None and token is None:
            continue
        spec = eps.get(role)
        if not isinstance(spec, dict):
            spec = {"model": role}
        if url is not None:
            spec.pop("testbed", None)
            spec["url"] = url
        if token is not None:
            spec["token"] = token
        eps[role] = spec
    if eps:
        data["endpoints"] = eps
    return data


def load_config(path, environ: Mapping[str, str] = os.environ) -> ExperimentConfig:
    """YAML (or JSON, which YAML parses) config file plus environment overrides."""
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigurationError(f"cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigurationError(f"{path}: invalid YAML: {e}") from e
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    return ExperimentConfig.from_dict(apply_env_overrides(data, environ))


# -- endpoint resolution -------------------------------------------------------------


def resolve_endpoint(spec, role: str, testbed=None):
    if spec is None:
        return None
    if isinstance(spec, str):
        if spec == "mock-judge":
            return MockJudge()
        if spec.startswith("testbed:"):
            spec = {"testbed": spec.split(":", 1)[1]}
        else:
            raise ConfigurationError(f"endpoint {role}: unrecognised spec {spec!r}")
    if isinstance(spec, Mapping):
        if "testbed" in spec:
            if testbed is None:
                raise ConfigurationError(f"endpoint {role}: testbed model requested without a testbed section")
            which = spec["testbed"]
            models = {"target": testbed.target, "base": testbed.base, "reference": testbed.reference,
                      "rag-target": testbed.rag_target()}
            if which not in models:
                raise ConfigurationError(f"endpoint {role}: unknown testbed model {which!r}")
            return models[which]
        if "mock_judge" in spec:
            return MockJudge(**(spec["mock_judge"] or {}))
        if "url" not in spec:
            raise ConfigurationError(f"endpoint {role}: needs 'url'")
        if role == "embedding":
            return RemoteEmbedder(spec["url"], spec.get("model", "embedding"), spec.get("token"))
        opts = {k: spec[k] for k in ("timeout", "max_parallel", "retries", "top_k") if k in spec}
        return RemoteModel(Endpoint(spec["url"], spec.get("model", role), spec.get("token"), **opts))
    return connect(spec)


# -- report --------------------------------------------------------------------------


@dataclass
class ExperimentReport:
    body: dict
    generated_at: str = ""
    # per-arm ``{attack: [ScoredSample]}``; kept out of the body so the body
    # stays small and comparable across runs
    scores: Mapping[str, Mapping[str, list]] = field(default_factory=dict, compare=False, repr=False)

    @property
    def fingerprint(self) -> str:
        return self.body["fingerprint"]

    def body_bytes(self) -> bytes:
        return (json.dumps(self.body, sort_keys=True, indent=2, allow_nan=False) + "\n").encode()

    def cells(self) -> list[dict]:
        return self.body["cells"]

    def arm_names(self) -> list[str]:
        return [a["name"] for a in self.body["arms"]]


class _ExposedOutputs:
    """What an attacker sees: the logprobs returned with each answer, plus
    fresh scoring requests for anything else."""

    def __init__(self, system, outputs: Mapping):
        self.system, self.outputs = system, outputs
        self.name = getattr(system, "name", "system")
        self.max_parallel = getattr(system, "max_parallel", 1)

    def score(self, text, prefix=None):
        hit = self.outputs.get((prefix, text))
        return hit if hit is not None else self.system.score(text, prefix)

    def generate(self, prompt, max_tokens, temperature=0.0, seed=0):
        return self.system.generate(prompt, max_tokens, temperature, seed)


def _finite(x):
    return x if x is None or math.isfinite(x) else None


def _pmap(fn, items, workers):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _run_arm(arm: DefenseArm, records, ctx) -> dict:
    cfg: ExperimentConfig = ctx["config"]
    chain = arm.chain()
    system = DefendedModel(ctx["target"], chain, base=ctx["base"], judge=ctx["judge"],
                           gen=GenerationConfig(cfg.max_tokens, cfg.temperature), seed=cfg.seed)
    workers = cfg.max_workers or getattr(system, "max_parallel", 1)

    def answer(r: DatasetRecord):
        return system.respond(r.question, seed=derive_seed(cfg.seed, r.id))

    responses = _pmap(answer, records, workers)

    ems = [exact_match(resp.answer.text, r.answer) for r, resp in zip(records, responses)]
    f1s = [token_f1(resp.answer.text, r.answer) for r, resp in zip(records, responses)]
    utility = {"em": math.fsum(ems) / len(ems), "f1": math.fsum(f1s) / len(f1s), "n": len(records)}

    samples, outputs, dropped = [], {}, 0
    for r, resp in zip(records, responses):
        if cfg.surface == "response":
            if resp.answer.empty:
                dropped += 1
                continue
            samples.append(AttackSample(r.id, resp.answer.text, r.label, r.question))
            outputs[(r.question, resp.answer.text)] = resp.answer.scored
        else:
            samples.append(AttackSample(r.id, join_prompt(r.question, r.answer), r.label, None))
    view = _ExposedOutputs(system, outputs)
    suite = run_attack_suite(samples, {"target": view, "reference": ctx["reference"]}, ctx["attack_config"])

    metrics = {}
    for name in cfg.attacks:
        scored = suite[name]
        s = summarize([x.score.value for x in scored], [x.label for x in scored], cfg.fpr_targets)
        metrics[name] = {
            "auc": s.auc,
            "asr": s.asr,
            **{f"tpr@{f:g}": v for f, v in s.tpr_at.items()},
            "approximate": any(x.score.approximate for x in scored),
        }

    out = {"name": arm.name, "status": "ok", "chain": arm.to_dict(), "metrics": metrics,
           "utility": utility, "n_samples": len(samples), "n_dropped": dropped}
    if chain.epd:
        recs = [categorize(resp.verdict.final_answer, resp.bundle.target_answer.text, resp.bundle.base_answer.text)
                for resp in responses if resp.verdict is not None and not resp.verdict.empty]
        if recs:
            b = bias_report(recs)
            out["judge_bias"] = {"n_target": b.n_target, "n_base": b.n_base, "n_mixed": b.n_mixed,
                                 "p_target": b.p_target, "p_base": b.p_base, "p_mixed": b.p_mixed, "bias": b.bias}
        out["judge_fallbacks"] = sum(1 for r in responses if r.verdict is not None and r.verdict.fallback_used)
    if chain.adaptive is not None:
        summary = system.ledger.summary(cfg.delta)
        out["privacy_ledger"] = {k: _finite(v) if isinstance(v, float) else v for k, v in summary.items()}
    return out, suite


def _metric_names(cfg: ExperimentConfig) -> list[str]:
    return list(METRICS) + [f"tpr@{f:g}" for f in cfg.fpr_targets]


def run_experiment(config: ExperimentConfig) -> ExperimentReport:
    """Run the no-defense arm plus every configured defense arm.

    A failing arm is reported with ``status: failed``; the other arms are
    unaffected.
    """
    cfg = config
    testbed = build_testbed(TestbedConfig(**dict(cfg.testbed))) if cfg.testbed is not None else None
    records = load_dataset(cfg.dataset) if cfg.dataset else testbed.records()
    records = sorted(records, key=lambda r: r.id)
    members = [r for r in records if r.label == 1][: cfg.max_members]
    nonmembers = [r for r in records if r.label == 0][: cfg.max_nonmembers]
    records = sorted(members + nonmembers, key=lambda r: r.id)
    if not members or not nonmembers:
        raise InputError("dataset needs at least one member and one non-member")

    rag = cfg.mode == "rag-style"
    defaults = {}
    if testbed is not None:
        defaults = {"target": "rag-target" if rag else "target", "base": "base", "reference": "reference"}
    ep = {}
    for role in ("target", "base", "reference"):
        spec = cfg.endpoints.get(role)
        if spec is None and role in defaults:
            spec = {"testbed": defaults[role]}
        ep[role] = resolve_endpoint(spec, role, testbed)
    judge = resolve_endpoint(cfg.endpoints.get("judge", "mock-judge"), "judge", testbed)
    embedder = resolve_endpoint(cfg.endpoints.get("embedding"), "embedding", testbed) or HashingEmbedder(cfg.embedding_dim)

    target = ep["target"]
    if rag:
        passages = load_passages(cfg.corpus) if cfg.corpus else [
            (f"d{i:05d}", d) for i, d in enumerate(testbed.member_documents)]
        target = RagModel(target, build_index(embedder, passages), embedder, cfg.retrieval_k)

    recall_prefix = testbed.recall_prefix if testbed is not None else None
    ctx = {
        "config": cfg, "target": target, "base": ep["base"], "judge": judge,
        "reference": ep["reference"], "attack_config": cfg.attack_config(recall_prefix),
    }
    if "lira" in cfg.attacks and ctx["reference"] is None:
        raise ConfigurationError("lira requires a reference endpoint")

    arms, scores = [], {}
    for arm in (DefenseArm("none"),) + tuple(cfg.defenses):
        try:
            summary, scores[arm.name] = _run_arm(arm, records, ctx)
            arms.append(summary)
        except (MiaGuardError, OSError) as e:
            arms.append({"name": arm.name, "status": "failed", "error": f"{type(e).__name__}: {e}",
                         "chain": arm.to_dict()})

    base_arm = arms[0]
    cells = []
    for arm in arms:
        if arm["status"] != "ok":
            continue
        for attack in cfg.attacks:
            m = arm["metrics"][attack]
            cell = {"attack": attack, "defense": arm["name"]}
            for metric in _metric_names(cfg):
                cell[metric] = m[metric]
                if base_arm["status"] == "ok" and arm is not base_arm:
                    cell[f"{metric}_change"] = relative_change(m[metric], base_arm["metrics"][attack][metric])
                else:
                    cell[f"{metric}_change"] = None
            cells.append(cell)

    body = {
        "version": __version__,
        "fingerprint": cfg.fingerprint(),
        "config": cfg.to_dict(),
        "n_members": len(members),
        "n_nonmembers": len(nonmembers),
        "conventions": {
            "asr": "best-threshold accuracy of the rule score > t (t = -inf and every distinct score)",
            "auc_ties": "counted as 1/2",
            "tpr_at_fpr": "step convention, empirical FPR <= target, no interpolation",
            "orientation": "higher score => member",
            "zlib_level": ZLIB_LEVEL,
            "recall_prefix": ctx["attack_config"].recall_prefix,
            "surface": cfg.surface,
            "rag_template": "Context:\n[1] <passage>\n...\n\nQuestion: <question>" if rag else None,
            "judge_categories": "target/base/mixed; 'unknown' is unreachable and omitted",
        },
        "arms": arms,
        "cells": cells,
    }
    return ExperimentReport(body, datetime.now(timezone.utc).isoformat(timespec="seconds"), scores)


# -- rendering -------------------------------------------------------------------------


def render_table(report: ExperimentReport) -> str:
    """Fixed-width text table, one row per attack, metric columns per arm."""
    body = report.body
    attacks = list(dict.fromkeys(c["attack"] for c in body["cells"]))
    arms = [a["name"] for a in body["arms"] if a["status"] == "ok"]
    metrics = _body_metrics(body)
    by_key = {(c["attack"], c["defense"]): c for c in body["cells"]}

    header = ["attack"] + [f"{arm}:{m.upper()}" for arm in arms for m in metrics]
    rows = [header]
    for attack in attacks:
        row = [attack]
        for arm in arms:
            c = by_key[(attack, arm)]
            for m in metrics:
                row.append(f"{c[m]:.3f}" if arm == "none" else format_cell(c[m], c[f"{m}_change"]))
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows]

    extra = []
    for a in body["arms"]:
        if a["status"] != "ok":
            extra.append(f"arm {a['name']}: FAILED ({a['error']})")
            continue
        u = a["utility"]
        extra.append(f"arm {a['name']}: EM={u['em']:.3f} F1={u['f1']:.3f} n={u['n']}")
        if "judge_bias" in a:
            jb = a["judge_bias"]
            extra.append(f"  judge: target={jb['p_target']:.3f} base={jb['p_base']:.3f} "
                         f"mixed={jb['p_mixed']:.3f} bias={jb['bias']:.3f}")
        if "privacy_ledger" in a:
            pl = a["privacy_ledger"]
            eps = pl.get("epsilon_quadratic")
            extra.append(f"  ledger: steps={pl['steps']} rdp={pl.get('rdp_quadratic')} epsilon={eps}")
    conv = body.get("conventions", {})
    head = [f"surface={conv.get('surface')}  ASR={conv.get('asr')}  zlib level={conv.get('zlib_level')}"] \
        if conv else []
    return "\n".join(head + lines + [""] + extra) + "\n"


def _body_metrics(body: dict) -> list[str]:
    # fixed order, independent of how the body's keys were serialised
    return list(METRICS) + [f"tpr@{f:g}" for f in body["config"]["fpr_targets"]]


def plot_rows(report: ExperimentReport) -> list[tuple[str, str, str, float]]:
    metrics = _body_metrics(report.body)
    return [(c["attack"], c["defense"], m, c[m]) for c in report.body["cells"] for m in metrics]


def _atomic_write(path: Path, data) -> None:
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


REPORT_FORMATS = {"structured": "report.json", "table-text": "report.txt", "plot-data": "plot_data.csv"}


def emit_report(report: ExperimentReport, out_dir, formats: Sequence[str] = tuple(REPORT_FORMATS)) -> list[Path]:
    """Write the requested renderings; nothing is written if the directory is unusable."""
    unknown = set(formats) - set(REPORT_FORMATS)
    if unknown:
        raise ConfigurationError(f"unknown report format(s): {sorted(unknown)}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise InputError(f"cannot create output directory {out}: {e}") from e
    if not out.is_dir() or not os.access(out, os.W_OK | os.X_OK):
        raise InputError(f"output directory {out} is not writable")

    rendered = {}
    for fmt in formats:
        if fmt == "structured":
            rendered[fmt] = report.body_bytes()
        elif fmt == "table-text":
            rendered[fmt] = render_table(report)
        else:
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(("attack", "defense", "metric", "value"))
            for a, d, m, v in plot_rows(report):
                w.writerow((a, d, m, repr(float(v))))
            rendered[fmt] = buf.getvalue()
    paths = []
    for fmt, data in rendered.items():
        p = out / REPORT_FORMATS[fmt]
        _atomic_write(p, data)
        paths.append(p)
    return paths


def load_report(path) -> ExperimentReport:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise InputError(f"cannot read report {path}: {e}") from e
    return ExperimentReport(data)
