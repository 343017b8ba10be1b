"""Deep latent variable imputer: encoder on zero-imputed inputs, Gaussian
(or Student-t) decoder, importance-weighted observed-data bound, and
single/multiple imputation by self-normalized importance sampling.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import logsumexp as np_logsumexp

from . import numcore as nc
from .data import MaskedMatrix
from .errors import ConfigError, DataError, DimensionError, NumericError
from .fedstd import GlobalScaler
from .rngutil import derive_rng

SIGMA_FLOOR = 1e-3
MIN_DF = 3.0

_MAGIC = b"FMWB"
_FORMAT_VERSION = 1


@dataclass(frozen=True)
class MiwaeConfig:
    """Model shape and sampling budget."""

    n_features: int
    latent_dim: int = 20
    hidden_units: int = 256
    k_train: int = 50
    l_test: int = 10_000
    decoder: str = "gaussian"

    def __post_init__(self) -> None:
        if self.n_features < 1:
            raise ConfigError("n_features must be >= 1")
        if self.latent_dim < 1 or self.hidden_units < 1:
            raise ConfigError("latent_dim and hidden_units must be >= 1")
        if self.k_train < 1 or self.l_test < 1:
            raise ConfigError("k_train and l_test must be >= 1")
        if self.decoder not in ("gaussian", "student_t"):
            raise ConfigError(f"unknown decoder family {self.decoder!r}")

    @property
    def encoder_widths(self) -> list[int]:
        p, h, d = self.n_features, self.hidden_units, self.latent_dim
        return [p, h, h, 2 * d]

    @property
    def decoder_widths(self) -> list[int]:
        p, h, d = self.n_features, self.hidden_units, self.latent_dim
        out = 3 * p if self.decoder == "student_t" else 2 * p
        return [d, h, h, out]

    def layout(self) -> nc.ParamLayout:
        segs = nc.mlp_layout("enc", self.encoder_widths) + nc.mlp_layout(
            "dec", self.decoder_widths
        )
        return nc.ParamLayout(tuple((name, tuple(shape)) for name, shape in segs))

    def to_dict(self) -> dict:
        return {
            "n_features": self.n_features,
            "latent_dim": self.latent_dim,
            "hidden_units": self.hidden_units,
            "k_train": self.k_train,
            "l_test": self.l_test,
            "decoder": self.decoder,
        }


class MiwaeModel:
    """Config plus one flat parameter vector (encoder then decoder)."""

    __slots__ = ("config", "params")

    def __init__(self, config: MiwaeConfig, params: nc.ParamVector):
        if params.layout != config.layout():
            raise DimensionError("parameter layout does not match model config")
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: MiwaeConfig, rng: np.random.Generator) -> "MiwaeModel":
        layout = config.layout()
        parts: dict[str, np.ndarray] = {}
        for name, shape in layout.segments:
            if len(shape) == 2:
                fan_in, fan_out = shape
                scale = np.sqrt(2.0 / (fan_in + fan_out))
                parts[name] = rng.standard_normal(shape) * scale
            else:
                parts[name] = np.zeros(shape)
        return cls(config, nc.ParamVector(layout.flatten(parts), layout))

    def with_params(self, params: nc.ParamVector) -> "MiwaeModel":
        return MiwaeModel(self.config, params)

    # numpy-only forward passes, used outside training
    def encode(self, x_zeroed: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        enc_slice, _ = self._theta_split(self.params.values)
        out = nc.mlp_forward(enc_slice, x_zeroed, self.config.encoder_widths)
        d = self.config.latent_dim
        mu = out[:, :d]
        sigma = nc.softplus_np(out[:, d:]) + SIGMA_FLOOR
        return mu, sigma

    def decode(self, z: np.ndarray):
        _, dec_slice = self._theta_split(self.params.values)
        out = nc.mlp_forward(dec_slice, z, self.config.decoder_widths)
        p = self.config.n_features
        mu = out[:, :p]
        sigma = nc.softplus_np(out[:, p : 2 * p]) + SIGMA_FLOOR
        if self.config.decoder == "student_t":
            df = MIN_DF + nc.softplus_np(out[:, 2 * p :])
            return mu, sigma, df
        return mu, sigma

    def _theta_split(self, theta):
        n_enc = nc.mlp_param_count(self.config.encoder_widths)
        n_all = self.config.layout().size
        return (
            nc.narrow(theta, 0, n_enc),
            nc.narrow(theta, n_enc, n_all),
        )


@dataclass(frozen=True)
class ImputationDraws:
    """Multiple-imputation output: m completed rows plus the importance
    weights that produced them."""

    completions: np.ndarray  # (m, p)
    weights: np.ndarray  # (L,) self-normalized

    def __post_init__(self) -> None:
        if abs(float(self.weights.sum()) - 1.0) > 1e-9:
            raise NumericError("importance weights do not sum to 1")


def _check_batch(batch: MaskedMatrix, p: int) -> None:
    if batch.n_cols != p:
        raise DimensionError(f"batch has {batch.n_cols} columns, model expects {p}")
    empty = np.flatnonzero(batch.rows_fully_missing())
    if empty.size:
        raise DataError(f"row {int(empty[0])} has no observed entries")


def miwae_bound(model: MiwaeModel, batch: MaskedMatrix, k: int, rng: np.random.Generator,
                params=None):
    """Negative importance-weighted bound, averaged over the batch.

    `params` may override the model's parameter values with a raw array or a
    tape node; with a node the whole computation is recorded for backward().
    Latent draws are reparameterized (mu + sigma * eps), so the traced loss
    is a deterministic, differentiable function of the parameters given the
    consumed rng state.
    """
    cfg = model.config
    _check_batch(batch, cfg.n_features)
    theta = model.params.values if params is None else params
    n, p = batch.shape
    d = cfg.latent_dim
    eps = rng.standard_normal((n * k, d))

    enc_theta = nc.narrow(theta, 0, nc.mlp_param_count(cfg.encoder_widths))
    dec_theta = nc.narrow(theta, nc.mlp_param_count(cfg.encoder_widths), cfg.layout().size)

    enc_out = nc.mlp_forward(enc_theta, batch.values, cfg.encoder_widths)
    mu_z = nc.narrow(enc_out, 0, d, axis=1)
    sigma_z = nc.add(nc.softplus(nc.narrow(enc_out, d, 2 * d, axis=1)), SIGMA_FLOOR)

    z = nc.add(nc.repeat_rows(mu_z, k), nc.mul(nc.repeat_rows(sigma_z, k), eps))
    dec_out = nc.mlp_forward(dec_theta, z, cfg.decoder_widths)

    x_rep = np.repeat(batch.values, k, axis=0)
    mask_rep = np.repeat(batch.mask.astype(np.float64), k, axis=0)
    if cfg.decoder == "student_t":
        ll_obs = nc.masked_student_t_head_rowsum(x_rep, mask_rep, dec_out,
                                                 SIGMA_FLOOR, MIN_DF)
    else:
        ll_obs = nc.masked_gaussian_head_rowsum(x_rep, mask_rep, dec_out, SIGMA_FLOOR)

    # log p(z) - log q(z|x) collapses to -||z||^2/2 + sum(log sigma_z) + ||eps||^2/2
    # because (z - mu_z)/sigma_z is exactly eps.
    log_ratio = nc.add(
        nc.add(
            nc.mul(nc.reduce_sum(nc.square(z), axis=1), -0.5),
            nc.repeat_rows(nc.reduce_sum(nc.log(sigma_z), axis=1), k),
        ),
        0.5 * np.einsum("ij,ij->i", eps, eps),
    )
    log_w = nc.add(ll_obs, log_ratio)
    per_row = nc.logsumexp(nc.reshape(log_w, (n, k)), axis=1)
    loss = nc.add(nc.mul(nc.reduce_mean(per_row), -1.0), float(np.log(k)))
    if not np.isfinite(nc._value(loss)):
        raise NumericError("importance-weighted bound is not finite")
    return loss


def bound_with_gradient(model: MiwaeModel, batch: MaskedMatrix, k: int,
                        rng: np.random.Generator) -> tuple[float, nc.ParamVector]:
    """Convenience wrapper: loss value and its gradient as a ParamVector."""
    tape = nc.GradTape()
    w = tape.leaf(model.params.values)
    loss = miwae_bound(model, batch, k, rng, params=w)
    grad = tape.gradient(loss, w)
    return float(loss.value), nc.ParamVector(grad, model.params.layout)


def _log_weights(model: MiwaeModel, values: np.ndarray, mask: np.ndarray,
                 l: int, rng: np.random.Generator):
    """Self-normalized log importance weights and decoder stats for one row."""
    cfg = model.config
    x0 = np.where(mask, values, 0.0)[None, :]
    mu_z, sigma_z = model.encode(x0)
    eps = rng.standard_normal((l, cfg.latent_dim))
    z = mu_z + sigma_z * eps
    decoded = model.decode(z)
    mu_x, sigma_x = decoded[0], decoded[1]
    mask_f = np.broadcast_to(mask.astype(np.float64), (l, cfg.n_features))
    if cfg.decoder == "student_t":
        ll_obs = nc.masked_student_t_logpdf_rowsum(values, mask_f, mu_x, sigma_x, decoded[2])
    else:
        ll_obs = nc.masked_gaussian_logpdf_rowsum(values, mask_f, mu_x, sigma_x)
    log_ratio = (
        -0.5 * np.einsum("ij,ij->i", z, z)
        + np.log(sigma_z).sum()
        + 0.5 * np.einsum("ij,ij->i", eps, eps)
    )
    log_w = ll_obs + log_ratio
    if not np.isfinite(log_w).all():
        raise NumericError("non-finite importance weights")
    log_w = log_w - np_logsumexp(log_w)
    return log_w, decoded


def impute_single(model: MiwaeModel, values: np.ndarray, mask: np.ndarray,
                  l: int, rng: np.random.Generator) -> np.ndarray:
    """Complete one row: missing coordinates get the importance-weighted
    average of decoder means; observed coordinates are copied unchanged."""
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise DataError("row has no observed entries")
    out = values.copy()
    missing = ~mask
    if not missing.any():
        return out
    log_w, decoded = _log_weights(model, values, mask, l, rng)
    w = np.exp(log_w)
    out[missing] = w @ decoded[0][:, missing]
    return out


def impute_multiple(model: MiwaeModel, values: np.ndarray, mask: np.ndarray,
                    l: int, m: int, rng: np.random.Generator) -> ImputationDraws:
    """Sampling-importance-resampling draws from the missing-data posterior."""
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise DataError("row has no observed entries")
    if m < 1:
        raise ConfigError("m must be >= 1")
    missing = ~mask
    log_w, decoded = _log_weights(model, values, mask, l, rng)
    w = np.exp(log_w)
    w = w / w.sum()
    completions = np.tile(values, (m, 1))
    if missing.any():
        idx = rng.choice(l, size=m, p=w)
        mu = decoded[0][np.ix_(idx, np.flatnonzero(missing))]
        sigma = decoded[1][np.ix_(idx, np.flatnonzero(missing))]
        if model.config.decoder == "student_t":
            df = decoded[2][np.ix_(idx, np.flatnonzero(missing))]
            noise = rng.standard_t(df)
        else:
            noise = rng.standard_normal(mu.shape)
        completions[:, missing] = mu + sigma * noise
    return ImputationDraws(completions=completions, weights=w)


def impute_dataset(model: MiwaeModel, data: MaskedMatrix, l: int, seed: int) -> np.ndarray:
    """Row-wise single imputation with per-row rng streams derived from
    (seed, row index), so row order and parallel execution cannot change
    the result."""
    _check_batch(data, model.config.n_features)
    out = data.values.copy()
    for i in range(data.n_rows):
        if data.mask[i].all():
            continue
        rng = derive_rng(seed, "impute-row", i)
        out[i] = impute_single(model, data.values[i], data.mask[i], l, rng)
    return out


def prior_predictive_draws(model: MiwaeModel, m: int, rng: np.random.Generator) -> np.ndarray:
    """m draws of a full row from the generative model with z ~ N(0, I)."""
    z = rng.standard_normal((m, model.config.latent_dim))
    decoded = model.decode(z)
    mu, sigma = decoded[0], decoded[1]
    if model.config.decoder == "student_t":
        noise = rng.standard_t(decoded[2])
    else:
        noise = rng.standard_normal(mu.shape)
    return mu + sigma * noise


# ---------------------------------------------------------------------------
# Binary model files
# ---------------------------------------------------------------------------


def save_model(model: MiwaeModel, path, scaler: GlobalScaler | None = None) -> None:
    """Versioned binary format: magic, version, JSON header (config, layout,
    optional standardization scaler), then little-endian float64 values."""
    header = {
        "config": model.config.to_dict(),
        "layout": [[name, list(shape)] for name, shape in model.params.layout.segments],
    }
    if scaler is not None:
        header["scaler"] = {
            "mu": scaler.mu.tolist(),
            "sigma": scaler.sigma.tolist(),
            "n": scaler.n.tolist(),
        }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(model.params.values.astype("<f8").tobytes())


def load_model(path) -> tuple[MiwaeModel, GlobalScaler | None]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise DataError(f"{path}: not a fedimpute model file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _FORMAT_VERSION:
            raise DataError(f"{path}: unsupported model format version {version}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        config = MiwaeConfig(**header["config"])
        layout = nc.ParamLayout(
            tuple((name, tuple(shape)) for name, shape in header["layout"])
        )
        if layout != config.layout():
            raise DataError(f"{path}: layout header does not match config")
        values = np.frombuffer(fh.read(layout.size * 8), dtype="<f8").astype(np.float64)
        if values.shape[0] != layout.size:
            raise DataError(f"{path}: truncated parameter block")
    model = MiwaeModel(config, nc.ParamVector(values, layout))
    scaler = None
    if "scaler" in header:
        scaler = GlobalScaler(
            mu=np.asarray(header["scaler"]["mu"], dtype=np.float64),
            sigma=np.asarray(header["scaler"]["sigma"], dtype=np.float64),
            n=np.asarray(header["scaler"]["n"], dtype=np.float64),
        )
    return model, scaler
