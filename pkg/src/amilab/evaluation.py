"""Detection by prediction discrepancy and the metrics used to judge it.

Every evaluated example is a triple (gold X, original prediction Y,
attribute-model prediction Z). X != Y says the example is adversarial,
Y != Z says the detector flags it; together they give one of five cases.
Rates that would divide by zero are reported as undefined ("n/a"), never 0.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .errors import FormatError, ParseError, UsageError
from .model import TrainedModel
from .steering import SteeringParams, attribute_labels
from .witness import WitnessMap


class CaseLabel(Enum):
    TRUE_NEGATIVE = "X-X-X"
    FALSE_POSITIVE = "X-X-Y"
    TRUE_POSITIVE_RESTORED = "X-Y-X"
    FALSE_NEGATIVE = "X-Y-Y"
    TRUE_POSITIVE_DIVERTED = "X-Y-Z"

    @property
    def title(self) -> str:
        return "".join(part.capitalize() for part in self.name.split("_"))


CASE_ORDER = list(CaseLabel)


def classify_case(gold: int, original: int, attribute: int) -> CaseLabel:
    if gold == original:
        return CaseLabel.TRUE_NEGATIVE if attribute == original else CaseLabel.FALSE_POSITIVE
    if attribute == original:
        return CaseLabel.FALSE_NEGATIVE
    if attribute == gold:
        return CaseLabel.TRUE_POSITIVE_RESTORED
    return CaseLabel.TRUE_POSITIVE_DIVERTED


@dataclass(frozen=True)
class DetectionRecord:
    example_id: int
    gold: int
    original: int
    attribute: int
    flagged: bool
    case: CaseLabel
    source: str = "generated"
    attack: str = ""
    attack_success: bool | None = None

    @classmethod
    def make(cls, example_id, gold, original, attribute, source="generated", attack="", attack_success=None):
        gold, original, attribute = int(gold), int(original), int(attribute)
        return cls(int(example_id), gold, original, attribute, original != attribute,
                   classify_case(gold, original, attribute), source, attack, attack_success)

    @property
    def adversarial(self) -> bool:
        return self.gold != self.original

    def to_json(self) -> dict:
        return {
            "example_id": self.example_id, "gold": self.gold, "original": self.original,
            "attribute": self.attribute, "flagged": self.flagged, "case": self.case.value,
            "source": self.source, "attack": self.attack, "attack_success": self.attack_success,
        }


def rate_string(k: int, n: int) -> str:
    """Rate in the ``"0.67 [2/3]"`` style; ``"n/a [0/0]"`` when undefined."""
    if n == 0:
        return f"n/a [{k}/{n}]"
    return f"{k / n:.2f} [{k}/{n}]"


def _ratio(k: int, n: int) -> float | None:
    return None if n == 0 else k / n


@dataclass
class MetricsReport:
    counts: dict[CaseLabel, int]
    total: int
    per_attack: dict[str, "MetricsReport"] = field(default_factory=dict)

    @property
    def detected(self) -> int:
        return self.counts[CaseLabel.TRUE_POSITIVE_RESTORED] + self.counts[CaseLabel.TRUE_POSITIVE_DIVERTED]

    @property
    def adversarial(self) -> int:
        return self.detected + self.counts[CaseLabel.FALSE_NEGATIVE]

    @property
    def benign(self) -> int:
        return self.counts[CaseLabel.TRUE_NEGATIVE] + self.counts[CaseLabel.FALSE_POSITIVE]

    @property
    def flagged(self) -> int:
        return self.total - self.counts[CaseLabel.TRUE_NEGATIVE] - self.counts[CaseLabel.FALSE_NEGATIVE]

    @property
    def detection_rate(self) -> float | None:
        return _ratio(self.detected, self.adversarial)

    @property
    def false_positive_rate(self) -> float | None:
        return _ratio(self.counts[CaseLabel.FALSE_POSITIVE], self.benign)

    @property
    def flagged_fraction(self) -> float | None:
        return _ratio(self.flagged, self.total)

    @property
    def detection_rate_string(self) -> str:
        return rate_string(self.detected, self.adversarial)

    @property
    def false_positive_rate_string(self) -> str:
        return rate_string(self.counts[CaseLabel.FALSE_POSITIVE], self.benign)

    @property
    def flagged_fraction_string(self) -> str:
        return rate_string(self.flagged, self.total)

    def to_json(self) -> dict:
        out = {
            "counts": {c.value: self.counts[c] for c in CASE_ORDER},
            "total": self.total,
            "detection_rate": self.detection_rate,
            "false_positive_rate": self.false_positive_rate,
            "flagged_fraction": self.flagged_fraction,
            "detection_rate_str": self.detection_rate_string,
            "false_positive_rate_str": self.false_positive_rate_string,
            "flagged_fraction_str": self.flagged_fraction_string,
        }
        if self.per_attack:
            out["per_attack"] = {k: v.to_json() for k, v in sorted(self.per_attack.items())}
        return out

    def to_bytes(self) -> bytes:
        return json.dumps(self.to_json(), sort_keys=True, indent=1).encode("utf-8") + b"\n"

    def to_text(self, title: str = "Distribution of cases") -> str:
        rows = [(c.value, c.title, str(self.counts[c])) for c in CASE_ORDER]
        rows.append(("Total", "", str(self.total)))
        w0 = max(len(r[0]) for r in rows)
        w1 = max(len(r[1]) for r in rows)
        w2 = max(len(r[2]) for r in rows)
        lines = [title, "-" * (w0 + w1 + w2 + 4)]
        lines += [f"{a:<{w0}}  {b:<{w1}}  {c:>{w2}}" for a, b, c in rows]
        lines.append("-" * (w0 + w1 + w2 + 4))
        lines.append(f"detection rate       {self.detection_rate_string}")
        lines.append(f"false positive rate  {self.false_positive_rate_string}")
        lines.append(f"flagged fraction     {self.flagged_fraction_string}")
        for name, sub in sorted(self.per_attack.items()):
            lines.append(f"  [{name or '-'}] detection {sub.detection_rate_string}, "
                         f"FPR {sub.false_positive_rate_string}, flagged {sub.flagged_fraction_string}")
        return "\n".join(lines)


def _count(records) -> dict[CaseLabel, int]:
    counts = {c: 0 for c in CASE_ORDER}
    for r in records:
        counts[r.case] += 1
    return counts


def aggregate(records) -> MetricsReport:
    records = list(records)
    if not records:
        raise UsageError("cannot aggregate an empty record list")
    groups: dict[str, list] = {}
    for r in records:
        groups.setdefault(r.attack, []).append(r)
    per_attack = {}
    if len(groups) > 1 or "" not in groups:
        per_attack = {k: MetricsReport(_count(v), len(v)) for k, v in groups.items()}
    return MetricsReport(_count(records), len(records), per_attack)


# ---------------------------------------------------------------- triple logs

LOG_HEADER = ["gold", "original", "attribute"]


def parse_log(text: str, source: str = "external-log") -> list[DetectionRecord]:
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise UsageError("triple log is empty")
    header = [h.strip() for h in lines[0].split(",")]
    if header != LOG_HEADER:
        raise ParseError(f"expected header {','.join(LOG_HEADER)!r}, got {lines[0]!r}", 1)
    records = []
    for lineno, row in enumerate(csv.reader(lines[1:]), start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != 3:
            raise ParseError(f"expected 3 fields, got {len(row)}", lineno)
        try:
            gold, original, attribute = (int(cell.strip()) for cell in row)
        except ValueError:
            raise ParseError(f"non-integer field in {','.join(row)!r}", lineno) from None
        if min(gold, original, attribute) < 0:
            raise ParseError("class ids must be non-negative", lineno)
        records.append(DetectionRecord.make(len(records), gold, original, attribute, source))
    if not records:
        raise UsageError("triple log has a header but no rows")
    return records


def replay_log(path) -> list[DetectionRecord]:
    """Read a ``gold,original,attribute`` CSV into records tagged ``external-log``."""
    with open(path, encoding="utf-8") as fh:
        return parse_log(fh.read())


def format_log(records) -> str:
    buf = io.StringIO()
    buf.write(",".join(LOG_HEADER) + "\n")
    for r in records:
        buf.write(f"{r.gold},{r.original},{r.attribute}\n")
    return buf.getvalue()


def records_from_counts(counts: dict[CaseLabel, int]) -> list[DetectionRecord]:
    """Synthetic records realising the given case counts (classes 0, 1, 2)."""
    triples = {
        CaseLabel.TRUE_NEGATIVE: (0, 0, 0),
        CaseLabel.FALSE_POSITIVE: (0, 0, 1),
        CaseLabel.TRUE_POSITIVE_RESTORED: (0, 1, 0),
        CaseLabel.FALSE_NEGATIVE: (0, 1, 1),
        CaseLabel.TRUE_POSITIVE_DIVERTED: (0, 1, 2),
    }
    out = []
    for case in CASE_ORDER:
        for _ in range(counts.get(case, 0)):
            out.append(DetectionRecord.make(len(out), *triples[case], source="external-log"))
    return out


# ---------------------------------------------------------------- detection


def detect(model: TrainedModel, witness_map: WitnessMap, params: SteeringParams, image, gold,
           example_id: int = 0) -> DetectionRecord:
    return detect_batch(model, witness_map, params, np.asarray(image)[None], [gold], [example_id])[0]


def detect_batch(model, witness_map, params, images, golds, example_ids=None, attack="",
                 attack_success=None, original=None) -> list[DetectionRecord]:
    images = np.asarray(images, dtype=np.float64)
    ids = range(len(images)) if example_ids is None else example_ids
    y = model.predict_labels(images) if original is None else original
    z = attribute_labels(model, witness_map, params, images)
    succ = [None] * len(images) if attack_success is None else attack_success
    attacks = [attack] * len(images) if isinstance(attack, str) else attack
    return [DetectionRecord.make(i, g, a, b, "generated", t, s)
            for i, g, a, b, t, s in zip(ids, golds, y, z, attacks, succ)]


@dataclass
class MixedSet:
    """Clean and adversarial inputs evaluated together."""

    images: np.ndarray
    golds: np.ndarray
    attack: list[str]
    attack_success: list[bool | None]
    ids: list[int]

    @property
    def has_clean(self) -> bool:
        return any(a == "clean" for a in self.attack)

    @property
    def has_adversarial(self) -> bool:
        return any(a != "clean" for a in self.attack)


def mixed_set(clean_images, clean_golds, adversarial) -> MixedSet:
    """Clean rows first, then each adversarial example (tagged with its method)."""
    adversarial = list(adversarial)
    n = len(clean_images)
    images = np.concatenate([np.asarray(clean_images)] + [e.image[None] for e in adversarial])
    golds = np.concatenate([np.asarray(clean_golds, dtype=np.int64),
                            np.array([e.gold for e in adversarial], dtype=np.int64)])
    return MixedSet(images, golds, ["clean"] * n + [e.method for e in adversarial],
                    [None] * n + [e.success for e in adversarial], list(range(len(golds))))


@dataclass
class SweepRow:
    beta: float
    full: MetricsReport
    success_conditioned: MetricsReport
    records: list[DetectionRecord] = field(repr=False, default_factory=list)


@dataclass
class SweepReport:
    alpha: float
    epsilon: float
    rows: list[SweepRow]

    def row(self, beta: float) -> SweepRow:
        for r in self.rows:
            if r.beta == beta:
                return r
        raise KeyError(beta)

    def to_json(self) -> dict:
        return {
            "alpha": self.alpha,
            "epsilon": self.epsilon,
            "rows": [{"beta": r.beta, "full_pool": r.full.to_json(),
                      "success_conditioned": r.success_conditioned.to_json()} for r in self.rows],
        }

    def to_bytes(self) -> bytes:
        return json.dumps(self.to_json(), sort_keys=True, indent=1).encode("utf-8") + b"\n"

    def to_csv(self) -> str:
        """Full-pool view, one row per beta; undefined rates as ``n/a``."""
        fmt = lambda v: "n/a" if v is None else repr(float(v))
        lines = ["beta,detection_rate,fpr,flagged_fraction"]
        for r in self.rows:
            m = r.full
            lines.append(f"{r.beta!r},{fmt(m.detection_rate)},{fmt(m.false_positive_rate)},{fmt(m.flagged_fraction)}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        lines = [f"beta sweep (alpha={self.alpha}, epsilon={self.epsilon})",
                 f"{'beta':>8}  {'detection':>16}  {'FPR':>16}  {'flagged':>16}"]
        for r in self.rows:
            m = r.full
            lines.append(f"{r.beta:>8g}  {m.detection_rate_string:>16}  {m.false_positive_rate_string:>16}  "
                         f"{m.flagged_fraction_string:>16}")
        return "\n".join(lines)


def beta_sweep(model: TrainedModel, witness_map: WitnessMap, mixed: MixedSet, betas,
               alpha: float = 100.0, epsilon: float = 1.15, base: SteeringParams | None = None) -> SweepReport:
    """One full MetricsReport per beta over a mixed clean + adversarial set.

    Two views per beta: the full pool, and a success-conditioned pool that
    drops adversarial examples whose attack failed.
    """
    betas = list(betas)
    if not betas:
        raise UsageError("beta grid is empty")
    if not (mixed.has_clean and mixed.has_adversarial):
        raise UsageError("sweeps need both clean and adversarial examples; adversarial-only sets hide false positives")
    base = base or SteeringParams()
    original = model.predict_labels(mixed.images)
    rows = []
    for beta in betas:
        params = replace(base, beta=float(beta), alpha=float(alpha), epsilon=float(epsilon))
        recs = detect_batch(model, witness_map, params, mixed.images, mixed.golds, mixed.ids,
                            mixed.attack, mixed.attack_success, original)
        kept = [r for r in recs if r.attack == "clean" or r.attack_success]
        rows.append(SweepRow(float(beta), aggregate(recs), aggregate(kept), recs))
    return SweepReport(float(alpha), float(epsilon), rows)


def records_to_bytes(records) -> bytes:
    return json.dumps({"records": [r.to_json() for r in records]}, sort_keys=True, indent=1).encode("utf-8") + b"\n"


def records_from_json(d: dict) -> list[DetectionRecord]:
    try:
        out = []
        for r in d["records"]:
            rec = DetectionRecord.make(r["example_id"], r["gold"], r["original"], r["attribute"],
                                       r.get("source", "generated"), r.get("attack", ""), r.get("attack_success"))
            if rec.case.value != r.get("case", rec.case.value) or rec.flagged != r.get("flagged", rec.flagged):
                raise ValueError(f"record {rec.example_id}: stored case or flag disagrees with its triple")
            out.append(rec)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed detection records: {exc}") from exc
    return out


def load_records(path) -> list[DetectionRecord]:
    with open(path, "rb") as fh:
        try:
            return records_from_json(json.loads(fh.read().decode("utf-8")))
        except json.JSONDecodeError as exc:
            raise FormatError(f"detection records are not valid JSON: {exc}") from exc


def determinism_check(config=None, repetitions: int = 2, reseed_between_runs: bool = False, log=None,
                      reference=None):
    """Run the full pipeline ``repetitions`` times and compare artifact digests."""
    from .pipeline import determinism_check as run

    return run(config, repetitions, reseed_between_runs, log, reference)
