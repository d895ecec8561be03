"""
Model Compression Specs
-----------------------
Derives smaller cascaded models from a baseline by a target percentage
reduction of the total parameter count, and tabulates the parameter
ablations over decoder embedding size, encoder width and encoder depth.

Search order is deterministic: with the causal depth fixed at the
baseline's, every encoder width (a multiple of the head count, from the
baseline width downwards) is tried and the closest total wins. Only when
no width lands within tolerance is the causal depth reduced by one and the
width scan repeated. The non-causal encoder keeps its baseline depth. A TAR
decoder's embedding width follows the encoder width ratio; an LSTM
decoder is left as it is.
"""

import logging
from dataclasses import dataclass, replace

import pandas as pd

from core.errors import CompressionInfeasibleError, UsageError
from core.model import estimate_params

logger = logging.getLogger(__name__)

TOLERANCE = 0.05
MAX_FACTOR = 90


@dataclass(frozen=True)
class CompressionSpec:
    """
    Outcome of a compression search.

    Attributes:
        factor_percent (float): Requested reduction.
        baseline_total (int): Baseline parameter count.
        target_total (int): (1 - factor / 100) * baseline_total.
        realized_total (int): Parameter count of the derived model.
        model_dim (int): Derived encoder width.
        causal_layers (int): Derived causal depth.
        noncausal_layers (int): Non-causal depth (unchanged).
        embedding_dim (int): Derived decoder embedding width.
        layers_reduced (bool): Whether the depth had to shrink.
    """

    factor_percent: float
    baseline_total: int
    target_total: int
    realized_total: int
    model_dim: int
    causal_layers: int
    noncausal_layers: int
    embedding_dim: int
    layers_reduced: bool = False

    @property
    def realized_factor(self):
        return 100.0 * (1.0 - self.realized_total / self.baseline_total)

    @property
    def relative_error(self):
        return abs(self.realized_total - self.target_total) / self.target_total

    def to_dict(self):
        return {
            "factor_percent": self.factor_percent,
            "baseline_total": self.baseline_total,
            "target_total": self.target_total,
            "realized_total": self.realized_total,
            "realized_factor": round(self.realized_factor, 2),
            "model_dim": self.model_dim,
            "causal_layers": self.causal_layers,
            "noncausal_layers": self.noncausal_layers,
            "embedding_dim": self.embedding_dim,
            "layers_reduced": self.layers_reduced,
        }


def _scaled_decoder(decoder, ratio):
    if decoder.kind != "tar":
        return decoder
    width = max(decoder.num_heads, int(round(decoder.embedding_dim * ratio)))
    return replace(decoder, embedding_dim=width, hidden_dim=width, pred_dim=width, joint_dim=width)


def _candidate(config, decoder, model_dim, causal_layers):
    ratio = model_dim / config.cascade.model_dim
    return replace(
        config,
        cascade=replace(config.cascade, model_dim=model_dim, causal_layers=causal_layers),
        decoder=_scaled_decoder(decoder, ratio),
    )


def compress_config(base, factor_percent, decoder=None, allow_layer_reduction=True):
    """
    Derive a configuration with factor_percent fewer parameters than base.

    Args:
        base (TrainConfig): Baseline the reduction is measured against.
        factor_percent (float): Reduction in percent, 0 <= factor < 90.
        decoder (DecoderConfig, optional): Student decoder replacing the
            baseline's, e.g. a TAR decoder at the baseline embedding width.
        allow_layer_reduction (bool): Permit shrinking the causal depth.

    Returns:
        tuple: (TrainConfig, CompressionSpec).

    Raises:
        UsageError: If factor_percent is outside [0, 90).
        CompressionInfeasibleError: If no candidate lands within 5% of the target.
    """
    if not 0 <= factor_percent < MAX_FACTOR:
        raise UsageError(f"Compression factor must be in [0, {MAX_FACTOR}), got {factor_percent}")
    cascade = base.cascade
    decoder = decoder or base.decoder
    baseline_total = estimate_params(base.model_config)["total"]
    target = int(round((1.0 - factor_percent / 100.0) * baseline_total))

    if factor_percent == 0 and decoder == base.decoder:
        return base, CompressionSpec(
            factor_percent=0, baseline_total=baseline_total, target_total=target, realized_total=baseline_total,
            model_dim=cascade.model_dim, causal_layers=cascade.causal_layers,
            noncausal_layers=cascade.noncausal_layers, embedding_dim=base.decoder.embedding_dim,
        )

    depths = range(cascade.causal_layers, 0, -1) if allow_layer_reduction else [cascade.causal_layers]
    widths = range(cascade.model_dim, 0, -cascade.num_heads)
    closest = None
    for depth in depths:
        best = None
        for width in widths:
            if width % cascade.num_heads:
                continue
            candidate = _candidate(base, decoder, width, depth)
            total = estimate_params(candidate.model_config)["total"]
            if best is None or abs(total - target) < abs(best[1] - target):
                best = (candidate, total)
        if closest is None or abs(best[1] - target) < abs(closest[1] - target):
            closest = best
        if abs(best[1] - target) <= TOLERANCE * target:
            config, total = best
            if depth < cascade.causal_layers:
                logger.warning(f"Width scaling alone missed the target; causal depth reduced to {depth}")
            spec = CompressionSpec(
                factor_percent=factor_percent, baseline_total=baseline_total, target_total=target,
                realized_total=total, model_dim=config.cascade.model_dim, causal_layers=depth,
                noncausal_layers=cascade.noncausal_layers, embedding_dim=config.decoder.embedding_dim,
                layers_reduced=depth < cascade.causal_layers,
            )
            logger.info(f"Compressed {baseline_total:,} -> {total:,} parameters "
                        f"(D={spec.model_dim}, causal layers={depth}, E={spec.embedding_dim})")
            return config, spec

    config, total = closest
    closest_info = {
        "model_dim": config.cascade.model_dim,
        "causal_layers": config.cascade.causal_layers,
        "embedding_dim": config.decoder.embedding_dim,
        "total": total,
    }
    raise CompressionInfeasibleError(
        f"No architecture within {TOLERANCE:.0%} of {target:,} parameters; closest is {closest_info}",
        target=target, closest=closest_info,
    )


def _decoder_total(breakdown):
    return breakdown["decoder"]


def embedding_size_sweep(base_model, embedding_dims, reference=None):
    """
    Decoder size for TAR decoders of several embedding widths.

    Args:
        base_model (ModelConfig): Encoder and vocabulary to attach the decoder to.
        embedding_dims (iterable): TAR embedding widths.
        reference (ModelConfig, optional): Reference model whose decoder the
            reduction is measured against; defaults to base_model.

    Returns:
        pandas.DataFrame: embedding_dim, decoder_params, reduction_percent.
    """
    reference_decoder = _decoder_total(estimate_params(reference or base_model))
    rows = []
    for width in embedding_dims:
        decoder = replace(base_model.decoder, kind="tar", embedding_dim=width, hidden_dim=width,
                          pred_dim=width, joint_dim=width, tied=True)
        params = _decoder_total(estimate_params(replace(base_model, decoder=decoder)))
        rows.append({
            "embedding_dim": width,
            "decoder_params": params,
            "reduction_percent": round(100.0 * (1.0 - params / reference_decoder), 2),
        })
    return pd.DataFrame(rows)


def cell_size_sweep(base_model, model_dims):
    """Total size and compression for several encoder widths."""
    baseline = estimate_params(base_model)["total"]
    rows = []
    for width in model_dims:
        config = replace(base_model, cascade=replace(base_model.cascade, model_dim=width))
        total = estimate_params(config)["total"]
        rows.append({
            "model_dim": width,
            "total_params": total,
            "compression_percent": round(100.0 * (1.0 - total / baseline), 2),
        })
    return pd.DataFrame(rows)


def layer_depth_sweep(base_model, causal_depths):
    """Total size and compression for several causal encoder depths."""
    baseline = estimate_params(base_model)["total"]
    rows = []
    for depth in causal_depths:
        config = replace(base_model, cascade=replace(base_model.cascade, causal_layers=depth))
        total = estimate_params(config)["total"]
        rows.append({
            "causal_layers": depth,
            "noncausal_layers": base_model.cascade.noncausal_layers,
            "total_params": total,
            "compression_percent": round(100.0 * (1.0 - total / baseline), 2),
        })
    return pd.DataFrame(rows)
