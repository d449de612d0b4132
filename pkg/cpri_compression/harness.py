"""
Operations behind the command line: datasets on disk, training one bundle per grid point, rate-distortion
sweeps over the trained bundles, and the covariance check on decimated downlink frames.
"""

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from logging import getLogger
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from cpri_compression.advanced_modes import RefinementStack, VariableRateSet, train_refinement_layer, train_vr_entropy
from cpri_compression.bitstream import Bitstream, read_stream_file, write_stream_file
from cpri_compression.bundle import ModelBundle
from cpri_compression.classical_codecs import train_scalar, train_vector
from cpri_compression.codecs import (
    Codec,
    LatentUniformCodec,
    LatentVqCodec,
    NeuralCodec,
    RefinementCodec,
    ScalarCodec,
    VariableRateCodec,
    VectorCodec,
    load_codec,
    neural_model,
)
from cpri_compression.datasets import generate_frames, read_frames, write_frames
from cpri_compression.entropy_codec import build_table
from cpri_compression.evaluation import evaluate_codec, simulate_link_drops
from cpri_compression.exceptions import ImproperlyConfigured
from cpri_compression.latent_codecs import LatentUniformModel, LatentVqModel
from cpri_compression.multirate import decimate
from cpri_compression.neural_core import THREADS_ENVIRONMENT_VARIABLE
from cpri_compression.options import RunOptions, _merge, options_digest
from cpri_compression.pipeline import PreparedFrames, SignalContext, prepare_frames, with_cyclic_prefix
from cpri_compression.reporting import RdRow, check_orderings, plot_report, write_report
from cpri_compression.signal_chain import CovarianceReport, FrameSpec, covariance_report
from cpri_compression.training import (
    TensorData,
    collect_symbols,
    train_latent_uniform,
    train_latent_vq,
    train_neural,
)

logger = getLogger("cpri-compression")

SPLITS = ("train", "val", "test")
Q_SCHEMES = ("scalar", "vector", "latent-uniform", "latent-vq")


def _suffix(tag: str) -> str:
    return f"-{tag}" if tag else ""


def dataset_path(opts: RunOptions, split: str, tag: str = "") -> Path:
    return Path(opts["output_dir"]) / "data" / f"{opts['frame']['scenario']}{_suffix(tag)}" / f"{split}.cprf"


def bundle_path(opts: RunOptions, scheme: str, rate_param: Optional[float] = None, tag: str = "") -> Path:
    name = scheme if rate_param is None else f"{scheme}-{rate_param:g}"
    return Path(opts["output_dir"]) / "bundles" / f"{opts['frame']['scenario']}{_suffix(tag)}" / f"{name}.npz"


def checkpoint_path(opts: RunOptions, name: str, tag: str = "") -> Path:
    return Path(opts["output_dir"]) / "checkpoints" / f"{opts['frame']['scenario']}{_suffix(tag)}" / f"{name}.pt"


def report_path(opts: RunOptions, extension: str) -> Path:
    return Path(opts["output_dir"]) / "reports" / f"rd-{opts['frame']['scenario']}.{extension}"


def worker_count(opts: RunOptions) -> int:
    if opts["deterministic"]:
        return 1
    return int(os.environ.get(THREADS_ENVIRONMENT_VARIABLE, opts["dataset"]["workers"]))


def mismatch_options(opts: RunOptions, name: str) -> RunOptions:
    """The run options with one mismatch scenario's channel or modulation overrides applied"""
    entries = {entry.get("name"): entry for entry in opts["sweep"]["mismatch"]}
    if name not in entries:
        raise ImproperlyConfigured(f"Unknown mismatch scenario '{name}', expected one of {sorted(entries)}")
    entry = entries[name]
    overrides: Dict[str, Dict] = {}
    channel = {key: entry[key] for key in ("snr_db", "n_taps") if key in entry}  # type: ignore[literal-required]
    if channel:
        overrides["channel"] = channel
    if "mod_order" in entry:
        overrides["frame"] = {"mod_order": entry["mod_order"]}
    return _merge(source=overrides, into=opts)


def _channel(opts: RunOptions) -> Optional[Tuple[int, float]]:
    channel = opts["channel"]
    if opts["frame"]["scenario"] != "uplink" or not channel["enabled"]:
        return None
    return channel["n_taps"], channel["snr_db"]


def generate_dataset(opts: RunOptions, splits: Sequence[str] = SPLITS, tag: str = "") -> Dict[str, Path]:
    spec = FrameSpec.from_options(opts["frame"])
    written = {}
    for split in splits:
        frames = generate_frames(
            spec, opts["dataset"][f"{split}_frames"], opts["seed"], split, _channel(opts), worker_count(opts)
        )
        path = dataset_path(opts, split, tag)
        path.parent.mkdir(parents=True, exist_ok=True)
        write_frames(path, frames, spec)
        written[split] = path
    return written


def generate_all_datasets(opts: RunOptions, matched: bool = False) -> Dict[str, Path]:
    """Base splits, plus the test split of every mismatch scenario (all splits with `matched`)"""
    written = dict(generate_dataset(opts))
    for entry in opts["sweep"]["mismatch"]:
        name = entry["name"]
        splits = SPLITS if matched else ("test",)
        for split, path in generate_dataset(mismatch_options(opts, name), splits, tag=name).items():
            written[f"{name}/{split}"] = path
    return written


def load_split(opts: RunOptions, split: str, tag: str = "") -> np.ndarray:
    path = dataset_path(opts, split, tag)
    if not path.exists():
        raise ImproperlyConfigured(f"Dataset {path} not found; run gen-dataset first")
    frames, spec = read_frames(path)
    expected = FrameSpec.from_options(opts["frame"])
    if spec != expected:
        raise ImproperlyConfigured(f"Dataset {path} holds {spec} frames, configuration expects {expected}")
    return frames


@dataclass(frozen=True)
class TrainingData:
    ctx: SignalContext
    train: PreparedFrames
    validation: PreparedFrames

    def tensors(self) -> Tuple[TensorData, TensorData]:
        return TensorData.from_prepared(self.train, self.ctx), TensorData.from_prepared(self.validation, self.ctx)


def prepare_training(opts: RunOptions, tag: str = "") -> TrainingData:
    ctx = SignalContext.from_options(opts)
    return TrainingData(
        ctx,
        prepare_frames(load_split(opts, "train", tag), ctx),
        prepare_frames(load_split(opts, "val", tag), ctx),
    )


def _interleaved(s: np.ndarray) -> np.ndarray:
    return np.stack([s.real, s.imag], axis=-1).ravel()


def _train_scalar(opts: RunOptions, q_bits: float, data: TrainingData, tag: str) -> Codec:
    training = opts["training"]
    codebook = train_scalar(
        _interleaved(data.train.s), int(q_bits), training["lloyd_max_iter"], training["lloyd_tol"]
    )
    return ScalarCodec(data.ctx, codebook)


def _train_vector(opts: RunOptions, q_bits: float, data: TrainingData, tag: str) -> Codec:
    block = opts["sweep"]["vq_block"]
    blocks = _interleaved(data.train.s).reshape(-1, block)
    limit = opts["training"]["vq_training_blocks"]
    if len(blocks) > limit:
        rng = np.random.default_rng([opts["seed"], 4])
        blocks = blocks[np.sort(rng.choice(len(blocks), limit, replace=False))]
    codebook = train_vector(
        blocks, block, int(q_bits), opts["training"]["lloyd_max_iter"], opts["training"]["lloyd_tol"], opts["seed"]
    )
    return VectorCodec(data.ctx, codebook, entropy_coded=True)


def _train_latent_uniform(opts: RunOptions, q_bits: float, data: TrainingData, tag: str) -> Codec:
    model_options = opts["model"]
    torch.manual_seed(opts["seed"])
    model = LatentUniformModel(
        int(q_bits), model_options["latent_channels"], model_options["hidden"], model_options["layers"]
    )
    train, validation = data.tensors()
    train_latent_uniform(
        model,
        data.ctx,
        train,
        validation,
        opts["training"],
        opts["seed"],
        checkpoint_path(opts, f"latent-uniform-{q_bits:g}", tag),
    )
    return LatentUniformCodec(data.ctx, model, model_options)


def _train_latent_vq(opts: RunOptions, q_bits: float, data: TrainingData, tag: str) -> Codec:
    model_options = opts["model"]
    torch.manual_seed(opts["seed"])
    model = LatentVqModel(
        int(q_bits),
        model_options["vq_block"],
        model_options["vq_beta"],
        model_options["latent_channels"],
        model_options["hidden"],
        model_options["layers"],
    )
    train, validation = data.tensors()
    train_latent_vq(
        model,
        data.ctx,
        train,
        validation,
        opts["training"],
        opts["seed"],
        checkpoint_path(opts, f"latent-vq-{q_bits:g}", tag),
    )
    return LatentVqCodec(data.ctx, model, model_options)


def _train_neural(opts: RunOptions, lam: float, data: TrainingData, tag: str) -> Codec:
    torch.manual_seed(opts["seed"])
    model = neural_model(opts["model"])
    train, validation = data.tensors()
    train_neural(
        model,
        data.ctx,
        lam,
        train,
        validation,
        opts["training"],
        opts["seed"],
        checkpoint_path(opts, f"neural-{lam:g}", tag),
    )
    table = build_table(model.prior, collect_symbols(model, train))
    return NeuralCodec(data.ctx, model.eval(), table, lam, opts["model"])


def _train_refinement(opts: RunOptions, _: Optional[float], data: TrainingData, tag: str) -> Codec:
    model_options = opts["model"]
    torch.manual_seed(opts["seed"])
    stack = RefinementStack(
        opts["sweep"]["refinement_lambdas"],
        model_options["latent_channels"],
        model_options["hidden"],
        model_options["layers"],
        model_options["prior_filters"],
        model_options["prior_init_scale"],
    )
    train, validation = data.tensors()
    for layer in range(1, stack.depth + 1):
        train_refinement_layer(
            stack,
            layer,
            data.ctx,
            train,
            validation,
            opts["training"],
            seed=opts["seed"] + layer,
            checkpoint_path=checkpoint_path(opts, f"refinement-layer{layer}", tag),
        )
    return RefinementCodec(data.ctx, stack, model_options)


def _train_variable_rate(opts: RunOptions, _: Optional[float], data: TrainingData, tag: str) -> Codec:
    """Trains priors for every scale around the base neural model, reusing its bundle when one exists"""
    lam = opts["sweep"]["variable_rate_base_lambda"]
    base_path = bundle_path(opts, "neural", lam, tag)
    if base_path.exists():
        base = load_codec(ModelBundle.load(base_path), data.ctx)
    else:
        base = train_point(opts, "neural", lam, data, tag)
    assert isinstance(base, NeuralCodec)
    model_options = opts["model"]
    vr_set = VariableRateSet(
        base.model,
        base.table,
        opts["sweep"]["variable_rate_scales"],
        model_options["prior_filters"],
        model_options["prior_init_scale"],
    )
    train, validation = data.tensors()
    for rate in range(vr_set.rates):
        train_vr_entropy(
            vr_set,
            rate,
            train,
            validation,
            opts["training"],
            seed=opts["seed"] + rate,
            checkpoint_path=checkpoint_path(opts, f"variable-rate-{rate}", tag),
        )
    return VariableRateCodec(data.ctx, vr_set, vr_set.rates - 1, lam, model_options)


_TRAINERS: Dict[str, Callable[[RunOptions, Optional[float], TrainingData, str], Codec]] = {
    "scalar": _train_scalar,
    "vector": _train_vector,
    "latent-uniform": _train_latent_uniform,
    "latent-vq": _train_latent_vq,
    "neural": _train_neural,
    "refinement": _train_refinement,
    "variable-rate": _train_variable_rate,
}


def rate_grid(opts: RunOptions, scheme: str) -> List[Optional[float]]:
    if scheme not in _TRAINERS:
        raise ImproperlyConfigured(f"Unknown scheme '{scheme}', expected one of {sorted(_TRAINERS)}")
    if scheme in Q_SCHEMES:
        return [float(q) for q in opts["sweep"]["q_grid"]]
    if scheme == "neural":
        return [float(lam) for lam in opts["sweep"]["lambda_grid"]]
    return [None]


def train_point(
    opts: RunOptions, scheme: str, rate_param: Optional[float], data: TrainingData, tag: str = ""
) -> Codec:
    """Trains one grid point and saves its bundle"""
    logger.info(f"Training {scheme}{'' if rate_param is None else f' @ {rate_param:g}'}{_suffix(tag)}")
    codec = _TRAINERS[scheme](opts, rate_param, data, tag)  # type: ignore[arg-type]
    metadata = {"config_digest": options_digest(opts), "seed": opts["seed"], "tag": tag}
    codec.to_bundle(metadata).save(bundle_path(opts, scheme, rate_param, tag))
    return codec


def train_grid(opts: RunOptions, schemes: Sequence[str], tag: str = "") -> List[Path]:
    data = prepare_training(opts, tag)
    saved = []
    for scheme in schemes:
        for rate_param in rate_grid(opts, scheme):
            train_point(opts, scheme, rate_param, data, tag)
            saved.append(bundle_path(opts, scheme, rate_param, tag))
    return saved


def _variants(codec: Codec) -> List[Codec]:
    """Every operating point a bundle serves: one per decoded layer or per rate scale"""
    if isinstance(codec, RefinementCodec):
        stack = codec.stack
        return [RefinementCodec(codec.ctx, stack, codec.model_options, layers) for layers in range(1, 1 + stack.depth)]
    if isinstance(codec, VariableRateCodec):
        return [codec.at_rate(rate) for rate in range(codec.vr_set.rates)]
    return [codec]


@dataclass(frozen=True)
class SweepJob:
    opts: RunOptions
    scheme: str
    rate_param: Optional[float]
    bundle_tag: str = ""
    data_tag: str = ""
    row_tag: str = ""


def evaluate_job(job: SweepJob) -> List[RdRow]:
    """Rows for one bundle on one test set; a missing bundle or dataset yields no rows"""
    path = bundle_path(job.opts, job.scheme, job.rate_param, job.bundle_tag)
    data_path = dataset_path(job.opts, "test", job.data_tag)
    if not path.exists() or not data_path.exists():
        logger.warning(f"Skipping {job.scheme} {job.rate_param} [{job.row_tag}]: missing {path} or {data_path}")
        return []
    opts = mismatch_options(job.opts, job.data_tag) if job.data_tag else job.opts
    ctx = SignalContext.from_options(opts)
    codec = load_codec(ModelBundle.load(path), ctx)
    frames = load_split(opts, "test", job.data_tag)
    digest = options_digest(job.opts)
    return [
        RdRow.from_result(evaluate_codec(variant, frames, tag=job.row_tag), job.opts["seed"], digest)
        for variant in _variants(codec)
    ]


def sweep_jobs(opts: RunOptions, schemes: Optional[Sequence[str]] = None) -> List[SweepJob]:
    schemes = list(schemes or opts["sweep"]["schemes"])
    jobs = [SweepJob(opts, scheme, rate) for scheme in schemes for rate in rate_grid(opts, scheme)]
    for entry in opts["sweep"]["mismatch"]:
        name = entry["name"]
        for scheme in schemes:
            for rate in rate_grid(opts, scheme):
                jobs.append(SweepJob(opts, scheme, rate, data_tag=name, row_tag=f"mismatched:{name}"))
                if bundle_path(opts, scheme, rate, name).exists():
                    jobs.append(SweepJob(opts, scheme, rate, name, name, f"matched:{name}"))
    return jobs


def link_drop_rows(opts: RunOptions) -> List[RdRow]:
    path = bundle_path(opts, "refinement")
    if not path.exists():
        return []
    ctx = SignalContext.from_options(opts)
    codec = load_codec(ModelBundle.load(path), ctx)
    assert isinstance(codec, RefinementCodec)
    frames = load_split(opts, "test")
    probabilities = opts["sweep"]["layer_drop_probabilities"]
    result = simulate_link_drops(codec, frames, probabilities, opts["seed"])
    full = evaluate_codec(codec, frames, tag="link-drop")
    return [
        RdRow(
            scheme="refinement",
            rate_param=codec.rate_param,
            bits_per_element=full.bits_per_element,
            cr=full.cr,
            evm_pct=result.evm_pct,
            evm_db=result.evm_db,
            alpha=None,
            seed=opts["seed"],
            wall_s=full.wall_s,
            config_digest=options_digest(opts),
            tag="link-drop:" + "/".join(f"{p:g}" for p in probabilities),
        )
    ]


def sweep(opts: RunOptions, schemes: Optional[Sequence[str]] = None) -> List[RdRow]:
    jobs = sweep_jobs(opts, schemes)
    workers = worker_count(opts)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(evaluate_job, jobs))
    else:
        results = [evaluate_job(job) for job in jobs]
    rows = [row for job_rows in results for row in job_rows]
    if "refinement" in (schemes or opts["sweep"]["schemes"]):
        rows.extend(link_drop_rows(opts))
    check_orderings(rows)
    write_report(report_path(opts, "csv"), rows)
    plot_report(report_path(opts, "svg"), rows, title=f"{opts['frame']['scenario']} rate-distortion")
    return rows


def covcheck(opts: RunOptions, frames: Optional[int] = None) -> CovarianceReport:
    """Empirical covariance of noiseless decimated downlink frames against the closed form"""
    if opts["frame"]["scenario"] != "downlink":
        raise ImproperlyConfigured("The covariance check runs on the downlink scenario")
    ctx = SignalContext.from_options(opts)
    count = frames if frames is not None else opts["dataset"]["train_frames"]
    samples = generate_frames(ctx.frame, count, opts["seed"], "train", None, worker_count(opts))
    decimated = decimate(samples, ctx.resampler)
    k_star = (ctx.n_prime - ctx.frame.n_sym) // 2
    report = covariance_report(decimated, k_star, power=ctx.n_prime / ctx.frame.n_fft)
    path = Path(opts["output_dir"]) / "reports" / "covcheck-downlink.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    summary = {
        "frames": report.frames,
        "k_star": k_star,
        "rel_frobenius_error": report.rel_frobenius_error,
        "circulant_rel_error": report.circulant_rel_error,
        "mean_deviation_rms": report.mean_deviation_rms,
        "excess_kurtosis": report.excess_kurtosis,
        "neighbour_correlation": report.neighbour_correlation,
        "config_digest": options_digest(opts),
    }
    path.write_text(json.dumps(summary, indent=2))
    logger.info(f"Wrote covariance report to {path}")
    return report


def group_streams(streams: Sequence[Bitstream]) -> List[List[Bitstream]]:
    """Splits a stream file into frames: a refinement frame starts again at layer 1"""
    frames: List[List[Bitstream]] = []
    previous_layer = 0
    for stream in streams:
        layer = stream.layer_index or 0
        if not frames or layer <= previous_layer or layer == 0:
            frames.append([])
        frames[-1].append(stream)
        previous_layer = layer
    return frames


def describe_bundle(path: Path) -> Dict:
    bundle = ModelBundle.load(path)
    return {
        "scheme": bundle.scheme,
        "metadata": bundle.metadata,
        "parameter_counts": bundle.parameter_counts(),
        "total_parameters": sum(bundle.parameter_counts().values()),
    }


def load_bundle_codec(opts: RunOptions, path: Path, **selection) -> Codec:
    return load_codec(ModelBundle.load(path), SignalContext.from_options(opts), **selection)


def encode_file(opts: RunOptions, bundle: Path, source: Path, target: Path, **selection) -> int:
    """Encodes every frame of a CPRF file into one CPRZ stream file; returns the number of streams"""
    codec = load_bundle_codec(opts, bundle, **selection)
    frames, spec = read_frames(source)
    if spec != codec.ctx.frame:
        raise ImproperlyConfigured(f"{source} holds {spec} frames, configuration expects {codec.ctx.frame}")
    streams = [stream for frame in frames for stream in codec.encode_frame(frame)]
    target.parent.mkdir(parents=True, exist_ok=True)
    write_stream_file(target, streams)
    logger.info(f"Encoded {len(frames)} frames into {len(streams)} streams at {target}")
    return len(streams)


def decode_file(opts: RunOptions, bundle: Path, source: Path, target: Path) -> np.ndarray:
    """Decodes a CPRZ stream file into a CPRF file; downlink frames get their cyclic prefix back"""
    codec = load_bundle_codec(opts, bundle)
    frames = np.stack([codec.decode_frame(group) for group in group_streams(read_stream_file(source))])
    frames = with_cyclic_prefix(frames, codec.ctx)
    target.parent.mkdir(parents=True, exist_ok=True)
    write_frames(target, frames, codec.ctx.frame)
    return frames


def evaluate_bundle(opts: RunOptions, bundle: Path, split: str = "test", tag: str = "", **selection) -> RdRow:
    data_opts = mismatch_options(opts, tag) if tag else opts
    codec = load_codec(ModelBundle.load(bundle), SignalContext.from_options(data_opts), **selection)
    result = evaluate_codec(codec, load_split(data_opts, split, tag), tag=f"mismatched:{tag}" if tag else "")
    return RdRow.from_result(result, opts["seed"], options_digest(opts))
