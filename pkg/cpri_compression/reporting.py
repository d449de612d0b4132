"""Rate-distortion report rows, the versioned CSV they are written to, the SVG plot and the ordering checks."""

import csv
from dataclasses import asdict, dataclass, fields
from logging import getLogger
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from cpri_compression.evaluation import EvaluationResult  # noqa: E402
from cpri_compression.exceptions import BundleFormatError  # noqa: E402

logger = getLogger("cpri-compression")

REPORT_VERSION = 1
HEADER_LINE = f"# cpri-compression rd-report v{REPORT_VERSION}"


@dataclass(frozen=True)
class RdRow:
    scheme: str
    rate_param: float
    bits_per_element: float
    cr: float
    evm_pct: float
    evm_db: float
    alpha: Optional[float]
    seed: int
    wall_s: float
    config_digest: str
    tag: str = ""

    @classmethod
    def from_result(cls, result: EvaluationResult, seed: int, config_digest: str) -> "RdRow":
        return cls(
            scheme=result.scheme,
            rate_param=result.rate_param,
            bits_per_element=result.bits_per_element,
            cr=result.cr,
            evm_pct=result.evm_pct,
            evm_db=result.evm_db,
            alpha=result.alpha,
            seed=seed,
            wall_s=result.wall_s,
            config_digest=config_digest,
            tag=result.tag,
        )


COLUMNS = [f.name for f in fields(RdRow)]


def write_report(path: Path, rows: Iterable[RdRow]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        f.write(HEADER_LINE + "\n")
        writer = csv.DictWriter(f, fieldnames=COLUMNS)
        writer.writeheader()
        for row in rows:
            record = asdict(row)
            record["alpha"] = "" if row.alpha is None else row.alpha
            writer.writerow(record)
    logger.info(f"Wrote rate-distortion report to {path}")
    return path


def read_report(path: Path) -> List[RdRow]:
    with open(path, newline="") as f:
        header = f.readline().strip()
        if header != HEADER_LINE:
            raise BundleFormatError(f"{path} is not a version {REPORT_VERSION} report (header '{header}')")
        rows = []
        for record in csv.DictReader(f):
            rows.append(
                RdRow(
                    scheme=record["scheme"],
                    rate_param=float(record["rate_param"]),
                    bits_per_element=float(record["bits_per_element"]),
                    cr=float(record["cr"]),
                    evm_pct=float(record["evm_pct"]),
                    evm_db=float(record["evm_db"]),
                    alpha=float(record["alpha"]) if record["alpha"] else None,
                    seed=int(record["seed"]),
                    wall_s=float(record["wall_s"]),
                    config_digest=record["config_digest"],
                    tag=record["tag"],
                )
            )
    return rows


def _curves(rows: Iterable[RdRow]) -> Dict[str, List[RdRow]]:
    curves: Dict[str, List[RdRow]] = {}
    for row in rows:
        label = row.scheme if not row.tag else f"{row.scheme} ({row.tag})"
        curves.setdefault(label, []).append(row)
    return {label: sorted(points, key=lambda r: r.rate_param) for label, points in curves.items()}


def plot_report(path: Path, rows: Iterable[RdRow], title: str = "") -> Path:
    figure, axis = plt.subplots(figsize=(7, 5))
    for label, points in sorted(_curves(rows).items()):
        ordered = sorted(points, key=lambda r: r.bits_per_element)
        axis.plot([r.bits_per_element for r in ordered], [r.evm_db for r in ordered], marker="o", label=label)
    axis.set_xlabel("bits per real element")
    axis.set_ylabel("EVM (dB)")
    axis.set_title(title)
    axis.grid(True, alpha=0.3)
    axis.legend(fontsize="small")
    figure.tight_layout()
    figure.savefig(path, format="svg")
    plt.close(figure)
    logger.info(f"Wrote rate-distortion plot to {path}")
    return Path(path)


MISMATCH_TOLERANCE_DB = 3.0


def _paired_by_rate(rows: Iterable[RdRow], tag: str) -> Dict[Tuple[str, float], List[RdRow]]:
    paired: Dict[Tuple[str, float], List[RdRow]] = {}
    for row in rows:
        if row.tag == tag:
            paired.setdefault((row.scheme, row.rate_param), []).append(row)
    return paired


def _cross_scheme_violations(curves: Dict[str, List[RdRow]]) -> List[str]:
    violations = []
    scalar = curves.get("scalar", [])
    for point in curves.get("neural", []):
        budget = [row for row in scalar if row.bits_per_element >= point.bits_per_element]
        if not budget:
            continue
        nearest = min(budget, key=lambda r: r.bits_per_element)
        if not point.evm_pct < nearest.evm_pct:
            violations.append(
                f"neural lambda {point.rate_param:g} ({point.bits_per_element:.3f} bits, {point.evm_pct:.3f}%) "
                f"does not beat scalar Q={nearest.rate_param:g} ({nearest.bits_per_element:.3f} bits, "
                f"{nearest.evm_pct:.3f}%)"
            )
    uniform = {row.rate_param: row for row in curves.get("latent-uniform", [])}
    for point in curves.get("latent-vq", []):
        reference = uniform.get(point.rate_param)
        if reference is not None and not point.evm_db > reference.evm_db:
            violations.append(
                f"latent-vq does not beat latent-uniform at Q={point.rate_param:g} "
                f"({point.evm_db:.2f} dB against {reference.evm_db:.2f} dB)"
            )
    return violations


def _mismatch_violations(rows: List[RdRow]) -> List[str]:
    violations = []
    names = sorted({row.tag.split(":", 1)[1] for row in rows if row.tag.startswith("mismatched:")})
    for name in names:
        matched = _paired_by_rate(rows, f"matched:{name}")
        for key, mismatched in _paired_by_rate(rows, f"mismatched:{name}").items():
            for trained, tested in zip(matched.get(key, []), mismatched):
                loss = trained.evm_db - tested.evm_db
                if loss > MISMATCH_TOLERANCE_DB:
                    violations.append(
                        f"{key[0]} @ {key[1]:g} loses {loss:.2f} dB on {name} against the matched-trained model"
                    )
    return violations


def check_orderings(rows: Iterable[RdRow]) -> List[str]:
    """Orderings every sweep is expected to show; violations are logged and returned

    Per-scheme and cross-scheme orderings use the untagged rows. Rows tagged `mismatched:NAME` are held to within
    3 dB EVM of the `matched:NAME` rows of the same scheme and rate point.
    """
    table = list(rows)
    curves = _curves(row for row in table if not row.tag)
    violations = []
    scalar = curves.get("scalar", [])
    for lower, higher in zip(scalar, scalar[1:]):
        if not higher.evm_db > lower.evm_db:
            violations.append(
                f"scalar EVM does not increase from Q={lower.rate_param:g} ({lower.evm_db:.2f} dB) "
                f"to Q={higher.rate_param:g} ({higher.evm_db:.2f} dB)"
            )
    neural = curves.get("neural", [])
    for lower, higher in zip(neural, neural[1:]):
        if higher.bits_per_element < lower.bits_per_element or higher.evm_db < lower.evm_db:
            violations.append(f"neural rate or EVM decreases from lambda {lower.rate_param:g} to {higher.rate_param:g}")
    refinement = sorted(curves.get("refinement", []), key=lambda r: r.bits_per_element)
    for lower, higher in zip(refinement, refinement[1:]):
        if not higher.evm_db > lower.evm_db:
            violations.append(f"refinement EVM does not increase with the layer carrying {higher.bits_per_element:g}")
    variable = curves.get("variable-rate", [])
    for lower, higher in zip(variable, variable[1:]):
        if higher.bits_per_element < lower.bits_per_element:
            violations.append(f"variable-rate rate decreases from scale {lower.rate_param:g} to {higher.rate_param:g}")
    violations.extend(_cross_scheme_violations(curves))
    violations.extend(_mismatch_violations(table))
    for violation in violations:
        logger.warning(f"Ordering violated: {violation}")
    return violations
