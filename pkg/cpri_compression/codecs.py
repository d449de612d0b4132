"""
One codec class per compression scheme. Every codec turns a time-domain frame into CPRZ bitstreams and back
through the same decimate/scale/quantize path, so file-based and in-memory evaluation agree bit for bit.
"""

from logging import getLogger
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple, Type

import numpy as np
import torch
from bitarray import bitarray

from cpri_compression.advanced_modes import RefinementStack, VariableRateSet
from cpri_compression.bitstream import Bitstream, Scheme, pack_indices, unpack_indices
from cpri_compression.bundle import ModelBundle
from cpri_compression.classical_codecs import (
    ScalarCodebook,
    VectorCodebook,
    apply_scalar,
    apply_vector,
    decode_scalar,
    decode_vector,
)
from cpri_compression.entropy_codec import EntropyTable, NeuralCompressionModel, ac_decode, ac_encode
from cpri_compression.exceptions import BundleFormatError, CorruptStreamError, ImproperlyConfigured
from cpri_compression.latent_codecs import (
    LatentUniformModel,
    LatentVqModel,
    from_latent_blocks,
    stack_real,
    transform_encode,
    uniform_latent_indices,
    unstack_real,
    vq_latent_quantize,
)
from cpri_compression.options import ModelOptions
from cpri_compression.pipeline import SignalContext, encode_side, reconstruct_frames

logger = getLogger("cpri-compression")


class EncodedPayload(NamedTuple):
    payload: bitarray
    symbol_counts: Tuple[int, ...] = ()
    layer_index: Optional[int] = None
    rate_index: Optional[int] = None


class Codec:
    scheme: Scheme
    name: str

    def __init__(self, ctx: SignalContext):
        self.ctx = ctx

    @property
    def rate_param(self) -> float:
        raise NotImplementedError

    def encode_scaled(self, s: np.ndarray) -> List[EncodedPayload]:
        raise NotImplementedError

    def decode_scaled(self, streams: Sequence[Bitstream]) -> np.ndarray:
        raise NotImplementedError

    def _store(self, bundle: ModelBundle) -> None:
        raise NotImplementedError

    @classmethod
    def _restore(cls, bundle: ModelBundle, ctx: SignalContext, **selection) -> "Codec":
        raise NotImplementedError

    def encode_frame(self, frame: np.ndarray) -> List[Bitstream]:
        scaled = encode_side(frame, self.ctx)
        scaling = tuple(int(v) for v in scaled.t)
        return [
            Bitstream(
                scheme=self.scheme,
                scenario=self.ctx.frame.scenario,
                n_prime=self.ctx.n_prime,
                q_s=self.ctx.scaling.q_s,
                scaling=scaling,
                payload=encoded.payload,
                symbol_counts=encoded.symbol_counts,
                layer_index=encoded.layer_index,
                rate_index=encoded.rate_index,
            )
            for encoded in self.encode_scaled(scaled.s)
        ]

    def check_stream(self, stream: Bitstream) -> None:
        expected = (self.scheme, self.ctx.frame.scenario, self.ctx.n_prime, self.ctx.scaling.q_s, self.ctx.n_t)
        found = (stream.scheme, stream.scenario, stream.n_prime, stream.q_s, stream.n_t)
        if found != expected:
            raise CorruptStreamError(f"Stream header {found} does not match codec {expected}")

    def decode_frame(self, streams: Sequence[Bitstream]) -> np.ndarray:
        if not streams:
            raise CorruptStreamError("No bitstream to decode")
        for stream in streams:
            self.check_stream(stream)
        s_hat = self.decode_scaled(streams)
        return reconstruct_frames(s_hat, np.asarray(streams[0].scaling), self.ctx)

    def to_bundle(self, metadata: Optional[Dict[str, Any]] = None) -> ModelBundle:
        bundle = ModelBundle(
            self.name,
            dict(
                metadata or {},
                scenario=self.ctx.frame.scenario,
                n_prime=self.ctx.n_prime,
                rate_param=self.rate_param,
            ),
        )
        self._store(bundle)
        return bundle

    @classmethod
    def from_bundle(cls, bundle: ModelBundle, ctx: SignalContext, **selection) -> "Codec":
        if bundle.scheme != cls.name:
            raise BundleFormatError(f"Bundle {bundle.path or '<memory>'} holds a {bundle.scheme} model, not {cls.name}")
        if bundle.meta("n_prime") != ctx.n_prime or bundle.meta("scenario") != ctx.frame.scenario:
            raise BundleFormatError(
                f"Bundle {bundle.path or '<memory>'} was trained for {bundle.meta('scenario')} frames with "
                f"N'={bundle.meta('n_prime')}, not {ctx.frame.scenario} with N'={ctx.n_prime}"
            )
        return cls._restore(bundle, ctx, **selection)


class ScalarCodec(Codec):
    scheme = Scheme.SCALAR
    name = "scalar"

    def __init__(self, ctx: SignalContext, codebook: ScalarCodebook):
        super().__init__(ctx)
        self.codebook = codebook

    @property
    def rate_param(self) -> float:
        return self.codebook.q_bits

    def encode_scaled(self, s: np.ndarray) -> List[EncodedPayload]:
        _, payload = apply_scalar(s, self.codebook)
        return [EncodedPayload(payload)]

    def decode_scaled(self, streams: Sequence[Bitstream]) -> np.ndarray:
        return decode_scalar(streams[0].payload, self.codebook, self.ctx.n_prime)

    def _store(self, bundle: ModelBundle) -> None:
        bundle.metadata["q_bits"] = self.codebook.q_bits
        bundle.put("codebook.levels", self.codebook.levels)

    @classmethod
    def _restore(cls, bundle: ModelBundle, ctx: SignalContext, **selection) -> "ScalarCodec":
        return cls(ctx, ScalarCodebook(bundle.array("codebook.levels"), int(bundle.meta("q_bits"))))


class VectorCodec(Codec):
    scheme = Scheme.VECTOR
    name = "vector"

    def __init__(self, ctx: SignalContext, codebook: VectorCodebook, entropy_coded: bool = True):
        super().__init__(ctx)
        self.codebook = codebook
        self.entropy_coded = entropy_coded

    @property
    def rate_param(self) -> float:
        return self.codebook.q_bits

    def encode_scaled(self, s: np.ndarray) -> List[EncodedPayload]:
        _, payload = apply_vector(s, self.codebook, self.entropy_coded)
        return [EncodedPayload(payload)]

    def decode_scaled(self, streams: Sequence[Bitstream]) -> np.ndarray:
        return decode_vector(streams[0].payload, self.codebook, self.ctx.n_prime, self.entropy_coded)

    def _store(self, bundle: ModelBundle) -> None:
        bundle.metadata.update(
            q_bits=self.codebook.q_bits,
            block_dim=self.codebook.block_dim,
            alpha=self.codebook.alpha,
            entropy_coded=self.entropy_coded,
        )
        bundle.put("codebook.vectors", self.codebook.vectors)
        if self.codebook.code_lengths is not None:
            bundle.put("codebook.code_lengths", self.codebook.code_lengths)

    @classmethod
    def _restore(cls, bundle: ModelBundle, ctx: SignalContext, **selection) -> "VectorCodec":
        code_lengths = bundle.array("codebook.code_lengths") if bundle.has("codebook.code_lengths") else None
        codebook = VectorCodebook(
            vectors=bundle.array("codebook.vectors"),
            block_dim=int(bundle.meta("block_dim")),
            q_bits=int(bundle.meta("q_bits")),
            code_lengths=None if code_lengths is None else code_lengths.astype(np.int64),
            alpha=float(bundle.meta("alpha")),
        )
        return cls(ctx, codebook, bool(bundle.meta("entropy_coded")))


def _model_options(bundle: ModelBundle) -> ModelOptions:
    return bundle.meta("model")


def _rows(s: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(stack_real(np.asarray(s)), dtype=np.float64)


def _decoded(rows: torch.Tensor) -> np.ndarray:
    return unstack_real(rows.detach().squeeze(0).numpy())


class LatentUniformCodec(Codec):
    """Fixed-rate latent indices, Q bits per latent element in time-major order"""

    scheme = Scheme.LATENT_UNIFORM
    name = "latent-uniform"

    def __init__(self, ctx: SignalContext, model: LatentUniformModel, model_options: ModelOptions):
        super().__init__(ctx)
        self.model = model.eval()
        self.model_options = model_options

    @property
    def rate_param(self) -> float:
        return self.model.q_bits

    def encode_scaled(self, s: np.ndarray) -> List[EncodedPayload]:
        latent = transform_encode(_rows(s), self.model.encoder)
        indices = uniform_latent_indices(torch.from_numpy(latent.flat), self.model.q_bits)
        return [EncodedPayload(pack_indices(indices.numpy().astype(np.int64), self.model.q_bits))]

    def decode_scaled(self, streams: Sequence[Bitstream]) -> np.ndarray:
        channels = self.model_options["latent_channels"]
        indices = unpack_indices(streams[0].payload, self.model.q_bits, channels * self.ctx.n_prime)
        z_hat = indices.reshape(self.ctx.n_prime, channels).T / (2**self.model.q_bits - 1)
        with torch.no_grad():
            return _decoded(self.model.decoder(torch.from_numpy(np.ascontiguousarray(z_hat)).unsqueeze(0)))

    def _store(self, bundle: ModelBundle) -> None:
        bundle.metadata.update(q_bits=self.model.q_bits, model=dict(self.model_options))
        bundle.add_module("encoder", self.model.encoder)
        bundle.add_module("decoder", self.model.decoder)

    @classmethod
    def _restore(cls, bundle: ModelBundle, ctx: SignalContext, **selection) -> "LatentUniformCodec":
        options = _model_options(bundle)
        model = LatentUniformModel(
            int(bundle.meta("q_bits")), options["latent_channels"], options["hidden"], options["layers"]
        )
        bundle.load_module("encoder", model.encoder)
        bundle.load_module("decoder", model.decoder)
        return cls(ctx, model, options)


class LatentVqCodec(Codec):
    """Fixed-rate codeword indices, bQ bits per block of b latent elements"""

    scheme = Scheme.LATENT_VQ
    name = "latent-vq"

    def __init__(self, ctx: SignalContext, model: LatentVqModel, model_options: ModelOptions):
        super().__init__(ctx)
        self.model = model.eval()
        self.model_options = model_options

    @property
    def rate_param(self) -> float:
        return self.model.codebook.q_bits

    def encode_scaled(self, s: np.ndarray) -> List[EncodedPayload]:
        with torch.no_grad():
            z = self.model.encoder(torch.from_numpy(_rows(s)).unsqueeze(0))
            _, _, indices = vq_latent_quantize(z, self.model.codebook)
        return [EncodedPayload(pack_indices(indices.squeeze(0).numpy(), self.model.codebook.index_bits))]

    def decode_scaled(self, streams: Sequence[Bitstream]) -> np.ndarray:
        codebook = self.model.codebook
        channels = self.model_options["latent_channels"]
        count = channels * self.ctx.n_prime // codebook.block
        indices = torch.from_numpy(unpack_indices(streams[0].payload, codebook.index_bits, count))
        with torch.no_grad():
            z_q = from_latent_blocks(codebook.embedding[indices].unsqueeze(0), channels)
            return _decoded(self.model.decoder(z_q))

    def _store(self, bundle: ModelBundle) -> None:
        codebook = self.model.codebook
        bundle.metadata.update(
            q_bits=codebook.q_bits, block=codebook.block, beta=codebook.beta, model=dict(self.model_options)
        )
        bundle.add_module("encoder", self.model.encoder)
        bundle.add_module("decoder", self.model.decoder)
        bundle.add_module("codebook", codebook)

    @classmethod
    def _restore(cls, bundle: ModelBundle, ctx: SignalContext, **selection) -> "LatentVqCodec":
        options = _model_options(bundle)
        model = LatentVqModel(
            int(bundle.meta("q_bits")),
            int(bundle.meta("block")),
            float(bundle.meta("beta")),
            options["latent_channels"],
            options["hidden"],
            options["layers"],
        )
        bundle.load_module("encoder", model.encoder)
        bundle.load_module("decoder", model.decoder)
        bundle.load_module("codebook", model.codebook)
        return cls(ctx, model, options)


def neural_model(options: ModelOptions, input_rows: int = 2) -> NeuralCompressionModel:
    return NeuralCompressionModel(
        input_rows,
        options["latent_channels"],
        options["hidden"],
        options["layers"],
        options["prior_filters"],
        options["prior_init_scale"],
    )


def _store_neural(bundle: ModelBundle, prefix: str, model: NeuralCompressionModel) -> None:
    bundle.add_module(f"{prefix}encoder", model.encoder)
    bundle.add_module(f"{prefix}decoder", model.decoder)
    bundle.add_module(f"{prefix}prior", model.prior)


def _load_neural(bundle: ModelBundle, prefix: str, model: NeuralCompressionModel) -> NeuralCompressionModel:
    bundle.load_module(f"{prefix}encoder", model.encoder)
    bundle.load_module(f"{prefix}decoder", model.decoder)
    bundle.load_module(f"{prefix}prior", model.prior)
    return model.eval()


class NeuralCodec(Codec):
    scheme = Scheme.NEURAL
    name = "neural"

    def __init__(
        self, ctx: SignalContext, model: NeuralCompressionModel, table: EntropyTable, lam: float, model_options
    ):
        super().__init__(ctx)
        self.model = model.eval()
        self.table = table
        self.lam = lam
        self.model_options = model_options

    @property
    def rate_param(self) -> float:
        return self.lam

    def encode_scaled(self, s: np.ndarray) -> List[EncodedPayload]:
        symbols = self.model.encode_symbols(torch.from_numpy(_rows(s)).unsqueeze(0)).squeeze(0).numpy()
        payload, _ = ac_encode(symbols.astype(np.int64), self.table)
        return [EncodedPayload(payload, (symbols.shape[1],) * symbols.shape[0])]

    def decode_scaled(self, streams: Sequence[Bitstream]) -> np.ndarray:
        symbols = ac_decode(streams[0].payload, streams[0].symbol_counts, self.table)
        return _decoded(self.model.decode_symbols(torch.from_numpy(symbols.astype(np.float64)).unsqueeze(0)))

    def _store(self, bundle: ModelBundle) -> None:
        bundle.metadata.update(lam=self.lam, model=dict(self.model_options))
        _store_neural(bundle, "", self.model)
        bundle.add_table("table", self.table)

    @classmethod
    def _restore(cls, bundle: ModelBundle, ctx: SignalContext, **selection) -> "NeuralCodec":
        options = _model_options(bundle)
        model = _load_neural(bundle, "", neural_model(options))
        return cls(ctx, model, bundle.table("table"), float(bundle.meta("lam")), options)


class VariableRateCodec(Codec):
    """Neural scheme at rate point `rate` of a shared-transform set; the rate index travels in the header"""

    scheme = Scheme.NEURAL
    name = "variable-rate"

    def __init__(self, ctx: SignalContext, vr_set: VariableRateSet, rate: int, lam: float, model_options):
        super().__init__(ctx)
        if not 0 <= rate < vr_set.rates:
            raise ImproperlyConfigured(f"Rate index {rate} outside 0..{vr_set.rates - 1}")
        self.vr_set = vr_set.eval()
        self.rate = rate
        self.lam = lam
        self.model_options = model_options

    @property
    def rate_param(self) -> float:
        return self.vr_set.scales[self.rate]

    def at_rate(self, rate: int) -> "VariableRateCodec":
        return VariableRateCodec(self.ctx, self.vr_set, rate, self.lam, self.model_options)

    def encode_scaled(self, s: np.ndarray) -> List[EncodedPayload]:
        payload, counts = self.vr_set.encode(self.rate, _rows(s))
        return [EncodedPayload(payload, counts, rate_index=self.rate)]

    def decode_scaled(self, streams: Sequence[Bitstream]) -> np.ndarray:
        stream = streams[0]
        rate = stream.rate_index if stream.rate_index is not None else self.vr_set.rates - 1
        return unstack_real(self.vr_set.decode(rate, stream.payload, stream.symbol_counts))

    def _store(self, bundle: ModelBundle) -> None:
        bundle.metadata.update(lam=self.lam, scales=list(self.vr_set.scales), model=dict(self.model_options))
        bundle.add_module("encoder", self.vr_set.base.encoder)
        bundle.add_module("decoder", self.vr_set.base.decoder)
        for rate in range(self.vr_set.rates):
            bundle.add_module(f"prior{rate}", self.vr_set.prior(rate))
            if self.vr_set.trained[rate]:
                bundle.add_table(f"table{rate}", self.vr_set.tables[rate])

    @classmethod
    def _restore(cls, bundle: ModelBundle, ctx: SignalContext, **selection) -> "VariableRateCodec":
        options = _model_options(bundle)
        scales = [float(a) for a in bundle.meta("scales")]
        last = len(scales) - 1
        base = neural_model(options)
        bundle.load_module("encoder", base.encoder)
        bundle.load_module("decoder", base.decoder)
        bundle.load_module(f"prior{last}", base.prior)
        vr_set = VariableRateSet(
            base, bundle.table(f"table{last}"), scales, options["prior_filters"], options["prior_init_scale"]
        )
        for rate in range(last):
            bundle.load_module(f"prior{rate}", vr_set.prior(rate))
            if bundle.has(f"table{rate}.lower"):
                vr_set.tables[rate] = bundle.table(f"table{rate}")
                vr_set.trained[rate] = True
        rate = selection.get("rate")
        return cls(ctx, vr_set, last if rate is None else rate, float(bundle.meta("lam")), options)


class RefinementCodec(Codec):
    """One bitstream per layer, layer index in the header; decoding needs a contiguous prefix"""

    scheme = Scheme.REFINEMENT
    name = "refinement"

    def __init__(self, ctx: SignalContext, stack: RefinementStack, model_options, layers: Optional[int] = None):
        super().__init__(ctx)
        self.stack = stack.eval()
        self.layers = layers if layers is not None else stack.depth
        self.model_options = model_options

    @property
    def rate_param(self) -> float:
        return self.stack.lambdas[self.layers - 1]

    def encode_scaled(self, s: np.ndarray) -> List[EncodedPayload]:
        return [
            EncodedPayload(payload, counts, layer_index=i + 1)
            for i, (payload, counts) in enumerate(self.stack.encode(self.layers, _rows(s)))
        ]

    def _by_layer(self, streams: Sequence[Bitstream]) -> List[Optional[Tuple[bitarray, Tuple[int, ...]]]]:
        payloads: List[Optional[Tuple[bitarray, Tuple[int, ...]]]] = [None] * self.stack.depth
        for stream in streams:
            if not stream.layer_index or stream.layer_index > self.stack.depth:
                raise CorruptStreamError(f"Layer index {stream.layer_index} outside 1..{self.stack.depth}")
            payloads[stream.layer_index - 1] = (stream.payload, stream.symbol_counts)
        return payloads

    def decode_scaled(self, streams: Sequence[Bitstream]) -> np.ndarray:
        layers = max(stream.layer_index or 0 for stream in streams)
        return unstack_real(self.stack.decode(layers, self._by_layer(streams)))

    def decode_prefix(self, streams: Sequence[Bitstream]) -> Tuple[int, Optional[np.ndarray]]:
        """Longest intact prefix of whatever layers arrived, as a time-domain frame"""
        if not streams:
            return 0, None
        intact, rows = self.stack.decode_longest_prefix(self._by_layer(streams))
        if rows is None:
            return 0, None
        return intact, reconstruct_frames(unstack_real(rows), np.asarray(streams[0].scaling), self.ctx)

    def _store(self, bundle: ModelBundle) -> None:
        bundle.metadata.update(lambdas=list(self.stack.lambdas), model=dict(self.model_options))
        for i, stage in enumerate(self.stack.stages):
            if self.stack.trained[i]:
                _store_neural(bundle, f"layer{i + 1}.", stage)
                bundle.add_table(f"table{i + 1}", self.stack.tables[i])

    @classmethod
    def _restore(cls, bundle: ModelBundle, ctx: SignalContext, **selection) -> "RefinementCodec":
        options = _model_options(bundle)
        stack = RefinementStack(
            bundle.meta("lambdas"),
            options["latent_channels"],
            options["hidden"],
            options["layers"],
            options["prior_filters"],
            options["prior_init_scale"],
        )
        for i, stage in enumerate(stack.stages):
            if not bundle.has(f"table{i + 1}.lower"):
                break
            _load_neural(bundle, f"layer{i + 1}.", stage)
            stack.tables[i] = bundle.table(f"table{i + 1}")
            stack.trained[i] = True
        return cls(ctx, stack, options, selection.get("layers"))


CODECS: Dict[str, Type[Codec]] = {
    codec.name: codec
    for codec in (
        ScalarCodec,
        VectorCodec,
        LatentUniformCodec,
        LatentVqCodec,
        NeuralCodec,
        VariableRateCodec,
        RefinementCodec,
    )
}


def load_codec(bundle: ModelBundle, ctx: SignalContext, **selection) -> Codec:
    if bundle.scheme not in CODECS:
        raise BundleFormatError(f"Bundle {bundle.path or '<memory>'} holds unknown scheme '{bundle.scheme}'")
    return CODECS[bundle.scheme].from_bundle(bundle, ctx, **selection)
