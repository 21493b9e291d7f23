"""VQ image tokenizer: patch-MLP encoder/decoder, a learned codebook with
straight-through quantization, the edge/feature-preserving reconstruction
loss, and the frozen feature encoder used both in that loss and as the
feature space for the Frechet-distance proxy."""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import engine as eg
from . import kernels
from .engine import Tensor
from .seeding import make_rng

PHI_FEATURE_DIM = 32
PHI_HIDDEN_DIM = 128


class TrainingFailure(RuntimeError):
    """Training missed a hard target (separable synthetic data implies a bug)."""


class NumericFailure(RuntimeError):
    """Loss went non-finite; carries the last good parameters."""

    def __init__(self, message, last_good=None, step=None):
        super().__init__(message)
        self.last_good = last_good
        self.step = step


@dataclass
class TokenizerConfig:
    codebook_size: int = 128
    code_dim: int = 16
    patch: int = 4
    height: int = 32
    width: int = 32
    lambda_grad: float = 0.5
    lambda_feat: float = 0.1
    beta_commit: float = 0.25
    steps: int = 3000
    lr: float = 1e-3
    batch: int = 16
    seed: int = 0

    @property
    def grid(self):
        if self.height % self.patch or self.width % self.patch:
            raise eg.ShapeError(
                f"image dims {self.height}x{self.width} not divisible by patch {self.patch}"
            )
        return self.height // self.patch, self.width // self.patch


@dataclass
class LossWeights:
    lambda_grad: float = 0.5
    lambda_feat: float = 0.1
    beta_commit: float = 0.25

    def __post_init__(self):
        if self.lambda_grad < 0 or self.lambda_feat < 0 or self.beta_commit < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class TokenGrid:
    indices: np.ndarray  # (h, w) int64, row-major raster order
    source_dims: tuple

    def flatten(self) -> np.ndarray:
        return self.indices.reshape(-1)


# -- parameters ---------------------------------------------------------------

def _linear(rng, n_in, n_out, scale=None):
    scale = scale if scale is not None else 1.0 / np.sqrt(n_in)
    return Tensor(rng.normal(0.0, scale, size=(n_in, n_out)), tracked=True)


def _zeros(n):
    return Tensor(np.zeros(n), tracked=True)


def init_encoder(cfg: TokenizerConfig, rng) -> dict:
    p2 = cfg.patch * cfg.patch
    d = cfg.code_dim
    return {
        "embed_w": _linear(rng, p2, d), "embed_b": _zeros(d),
        "h1_w": _linear(rng, d, d), "h1_b": _zeros(d),
        "h2_w": _linear(rng, d, d), "h2_b": _zeros(d),
        "out_w": _linear(rng, d, d), "out_b": _zeros(d),
    }


def init_decoder(cfg: TokenizerConfig, rng) -> dict:
    p2 = cfg.patch * cfg.patch
    d = cfg.code_dim
    return {
        "in_w": _linear(rng, d, d), "in_b": _zeros(d),
        "h1_w": _linear(rng, d, d), "h1_b": _zeros(d),
        "h2_w": _linear(rng, d, d), "h2_b": _zeros(d),
        "out_w": _linear(rng, d, p2), "out_b": _zeros(p2),
    }


# -- forward passes --------------------------------------------------------------

def _patchify(images: Tensor, cfg: TokenizerConfig) -> Tensor:
    b = images.shape[0]
    h, w = cfg.grid
    p = cfg.patch
    if images.shape[1] != cfg.height or images.shape[2] != cfg.width:
        raise eg.ShapeError(f"expected {cfg.height}x{cfg.width} images, got {images.shape}")
    x = eg.reshape(images, (b, h, p, w, p))
    x = eg.transpose(x, (0, 1, 3, 2, 4))
    return eg.reshape(x, (b, h, w, p * p))


def _unpatchify(x: Tensor, cfg: TokenizerConfig) -> Tensor:
    b = x.shape[0]
    h, w = cfg.grid
    p = cfg.patch
    x = eg.reshape(x, (b, h, w, p, p))
    x = eg.transpose(x, (0, 1, 3, 2, 4))
    return eg.reshape(x, (b, h * p, w * p))


def encode(images, enc: dict, cfg: TokenizerConfig) -> Tensor:
    """Images (B,H,W) -> latent grid (B,h,w,d); deterministic, differentiable."""
    images = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float64))
    x = _patchify(images, cfg)
    x = eg.gelu(eg.add(eg.matmul(x, enc["embed_w"]), enc["embed_b"]))
    x = eg.gelu(eg.add(eg.matmul(x, enc["h1_w"]), enc["h1_b"]))
    x = eg.gelu(eg.add(eg.matmul(x, enc["h2_w"]), enc["h2_b"]))
    return eg.add(eg.matmul(x, enc["out_w"]), enc["out_b"])


def quantize(latents: Tensor, codes: Tensor):
    """Nearest-code lookup with a straight-through gradient to the latents.

    Returns (indices (B,h,w), quantized (B,h,w,d), parts) where parts holds
    the codebook term ||sg(z)-e||^2 and commitment term ||z-sg(e)||^2, both
    means over all latent elements.
    """
    if codes.ndim != 2:
        raise eg.ContractError(f"codebook must be (K, d), got {codes.shape}")
    if codes.shape[0] == 0:
        raise eg.ContractError("empty codebook")
    d = codes.shape[1]
    if latents.shape[-1] != d:
        raise eg.ShapeError(f"latent dim {latents.shape[-1]} != code dim {d}")
    lead = latents.shape[:-1]
    flat = eg.reshape(latents, (-1, d))
    idx = kernels.nearest_codes(flat.data, codes.data)
    selected = eg.gather_rows(codes, idx)

    # forward value = selected code; backward passes straight through to z
    quantized_flat = eg.add(flat, Tensor(selected.data - flat.data))
    quantized = eg.reshape(quantized_flat, lead + (d,))

    codebook_term = eg.tmean(eg.power(eg.add(selected, Tensor(-flat.data)), 2))
    commit_term = eg.tmean(eg.power(eg.add(flat, Tensor(-selected.data)), 2))
    return idx.reshape(lead), quantized, {"codebook": codebook_term, "commit": commit_term}


def decode(quantized: Tensor, dec: dict, cfg: TokenizerConfig) -> Tensor:
    """Latent grid (B,h,w,d) -> images (B,H,W) through a sigmoid squash."""
    h, w = cfg.grid
    if quantized.shape[1:3] != (h, w):
        raise eg.ShapeError(f"grid {quantized.shape[1:3]} does not match decoder config {h}x{w}")
    x = eg.gelu(eg.add(eg.matmul(quantized, dec["in_w"]), dec["in_b"]))
    x = eg.gelu(eg.add(eg.matmul(x, dec["h1_w"]), dec["h1_b"]))
    x = eg.gelu(eg.add(eg.matmul(x, dec["h2_w"]), dec["h2_b"]))
    x = eg.sigmoid(eg.add(eg.matmul(x, dec["out_w"]), dec["out_b"]))
    return _unpatchify(x, cfg)


def decode_grid(indices, codes: Tensor, dec: dict, cfg: TokenizerConfig) -> Tensor:
    indices = np.asarray(indices, dtype=np.int64)
    if indices.ndim == 2:
        indices = indices[None]
    if indices.min() < 0 or indices.max() >= codes.shape[0]:
        raise eg.ContractError(f"token id outside codebook range [0, {codes.shape[0]})")
    h, w = cfg.grid
    looked = eg.gather_rows(codes, indices.reshape(-1))
    return decode(eg.reshape(looked, (indices.shape[0], h, w, codes.shape[1])), dec, cfg)


# -- feature encoder (frozen classifier trunk) --------------------------------------

@dataclass
class FeatureEncoder:
    params: dict
    kinds: tuple
    dims: tuple
    frozen: bool = False
    val_auroc: dict = field(default_factory=dict)

    def features(self, images) -> Tensor:
        images = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float64))
        b = images.shape[0]
        x = eg.reshape(images, (b, self.dims[0] * self.dims[1]))
        x = eg.gelu(eg.add(eg.matmul(x, self.params["w1"]), self.params["b1"]))
        return eg.gelu(eg.add(eg.matmul(x, self.params["w2"]), self.params["b2"]))

    def logits(self, images) -> Tensor:
        return eg.add(eg.matmul(self.features(images), self.params["w3"]), self.params["b3"])

    def weights_hash(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self.params):
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return digest.hexdigest()


def init_phi(dims, kinds, rng) -> FeatureEncoder:
    n_in = dims[0] * dims[1]
    params = {
        "w1": _linear(rng, n_in, PHI_HIDDEN_DIM), "b1": _zeros(PHI_HIDDEN_DIM),
        "w2": _linear(rng, PHI_HIDDEN_DIM, PHI_FEATURE_DIM), "b2": _zeros(PHI_FEATURE_DIM),
        "w3": _linear(rng, PHI_FEATURE_DIM, len(kinds)), "b3": _zeros(len(kinds)),
    }
    return FeatureEncoder(params, tuple(kinds), tuple(dims))


def _macro_auroc(phi: FeatureEncoder, images, labels) -> dict:
    from .metrics import ScoredBinary, UndefinedMetricError, auroc

    scores = phi.logits(images).data
    out = {}
    values = []
    for j, kind in enumerate(phi.kinds):
        try:
            out[kind] = auroc([ScoredBinary(float(s), int(l)) for s, l in zip(scores[:, j], labels[:, j])])
            values.append(out[kind])
        except UndefinedMetricError:
            out[kind] = float("nan")
    out["macro"] = float(np.mean(values)) if values else float("nan")
    return out


def pretrain_phi(train_images, train_labels, val_images, val_labels, *,
                 kinds, steps=1000, lr=1e-3, batch=16, seed=0,
                 target_auroc=0.9, floor_auroc=0.8) -> FeatureEncoder:
    """Multi-label finding-presence classifier; trunk frozen afterwards."""
    train_images = np.asarray(train_images, dtype=np.float64)
    train_labels = np.asarray(train_labels, dtype=np.float64)
    dims = train_images.shape[1:]
    phi = init_phi(dims, kinds, make_rng(seed, "phi-init"))
    order_rng = make_rng(seed, "phi-batches")

    names = sorted(phi.params)
    state = eg.AdamState()
    for _ in range(steps):
        idx = order_rng.integers(0, train_images.shape[0], size=batch)
        loss = eg.tmean(eg.bce_with_logits(phi.logits(train_images[idx]), train_labels[idx]))
        if not np.isfinite(loss.data):
            raise NumericFailure("phi training loss went non-finite")
        eg.backward(loss)
        updated, state = eg.adam_step([phi.params[n] for n in names],
                                      [phi.params[n].grad for n in names], state, lr=lr)
        phi.params = dict(zip(names, updated))

    phi.val_auroc = _macro_auroc(phi, val_images, np.asarray(val_labels))
    phi.frozen = True
    for p in phi.params.values():
        p.tracked = False
    macro = phi.val_auroc["macro"]
    if not np.isfinite(macro) or macro < floor_auroc:
        raise TrainingFailure(
            f"feature encoder reached macro-AUROC {macro:.3f} < {floor_auroc} "
            f"within {steps} steps; the synthetic corpus is separable, so this is a bug"
        )
    if macro < target_auroc:
        warnings.warn(f"feature encoder macro-AUROC {macro:.3f} below target {target_auroc}")
    return phi


# -- reconstruction loss ---------------------------------------------------------------

def clinical_recon_loss(x, x_hat: Tensor, weights: LossWeights, phi: FeatureEncoder | None):
    """total = mean L1 + lambda_grad * mean squared gradient difference
    + lambda_feat * mean squared feature difference.

    Returns (total, pixel_part, grad_part, feat_part); the raw parts are
    unweighted, and total == pixel + lg*grad + lf*feat exactly.
    """
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if x.shape != x_hat.shape:
        raise eg.ShapeError(f"x {x.shape} vs x_hat {x_hat.shape}")
    pixel = eg.tmean(eg.absolute(eg.add(x_hat, Tensor(-x.data))))

    gx_ref, gy_ref = eg.image_gradient(Tensor(x.data))
    gx_hat, gy_hat = eg.image_gradient(x_hat)
    dx = eg.power(eg.add(gx_hat, Tensor(-gx_ref.data)), 2)
    dy = eg.power(eg.add(gy_hat, Tensor(-gy_ref.data)), 2)
    grad_part = eg.mul(eg.add(eg.tsum(dx), eg.tsum(dy)), 1.0 / (dx.size + dy.size))

    if weights.lambda_feat > 0:
        if phi is None or not phi.frozen:
            raise eg.ContractError("feature loss needs a frozen feature encoder")
        feats_ref = phi.features(Tensor(x.data))
        feats_hat = phi.features(x_hat)
        feat_part = eg.tmean(eg.power(eg.add(feats_hat, Tensor(-feats_ref.data)), 2))
    else:
        feat_part = eg.mul(eg.tsum(x_hat), 0.0)  # keeps the tape shape without a phi pass

    total = eg.add(eg.add(pixel, eg.mul(grad_part, weights.lambda_grad)),
                   eg.mul(feat_part, weights.lambda_feat))
    return total, pixel, grad_part, feat_part


# -- tokenizer training ---------------------------------------------------------------------

@dataclass
class Tokenizer:
    cfg: TokenizerConfig
    encoder: dict
    decoder: dict
    codes: Tensor
    phi_hash: str = ""
    usage: np.ndarray | None = None

    def tokenize(self, image) -> TokenGrid:
        """encode -> quantize -> raster grid for one (H,W) image."""
        image = np.asarray(image, dtype=np.float64)
        latents = encode(image[None], self.encoder, self.cfg)
        idx, _, _ = quantize(latents, self.codes)
        return TokenGrid(idx[0], (self.cfg.height, self.cfg.width))

    def tokenize_ids(self, image) -> np.ndarray:
        return self.tokenize(image).flatten()

    def tokenize_batch(self, images) -> np.ndarray:
        latents = encode(np.asarray(images, dtype=np.float64), self.encoder, self.cfg)
        idx, _, _ = quantize(latents, self.codes)
        return idx.reshape(idx.shape[0], -1)

    def detokenize(self, ids) -> np.ndarray:
        h, w = self.cfg.grid
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            if ids.size != h * w:
                raise eg.ContractError(f"sequence length {ids.size} != {h}*{w}")
            ids = ids.reshape(h, w)
        return decode_grid(ids, self.codes, self.decoder, self.cfg).data[0]


def _all_params(tok: Tokenizer):
    names = ([("enc", n) for n in sorted(tok.encoder)] + [("dec", n) for n in sorted(tok.decoder)]
             + [("codes", "codes")])
    tensors = [tok.encoder[n] if g == "enc" else tok.decoder[n] if g == "dec" else tok.codes
               for g, n in names]
    return names, tensors


def _put_params(tok: Tokenizer, names, tensors):
    for (group, name), tensor in zip(names, tensors):
        if group == "enc":
            tok.encoder[name] = tensor
        elif group == "dec":
            tok.decoder[name] = tensor
        else:
            tok.codes = tensor


def init_tokenizer(cfg: TokenizerConfig, sample_images=None) -> Tokenizer:
    rng = make_rng(cfg.seed, "tokenizer-init")
    enc = init_encoder(cfg, rng)
    dec = init_decoder(cfg, rng)
    if sample_images is not None and len(sample_images) > 0:
        # seed codes from real encoder outputs so most codes start in use
        latents = encode(np.asarray(sample_images, dtype=np.float64), enc, cfg).data.reshape(-1, cfg.code_dim)
        take = rng.choice(latents.shape[0], size=cfg.codebook_size,
                          replace=latents.shape[0] < cfg.codebook_size)
        codes = Tensor(latents[take].copy(), tracked=True)
    else:
        codes = Tensor(rng.normal(0.0, 0.5, size=(cfg.codebook_size, cfg.code_dim)), tracked=True)
    return Tokenizer(cfg, enc, dec, codes)


def tokenizer_step_loss(tok: Tokenizer, batch_images, weights: LossWeights, phi):
    latents = encode(batch_images, tok.encoder, tok.cfg)
    idx, quantized, parts = quantize(latents, tok.codes)
    x_hat = decode(quantized, tok.decoder, tok.cfg)
    total_recon, pixel, grad_part, feat_part = clinical_recon_loss(batch_images, x_hat, weights, phi)
    objective = eg.add(eg.add(total_recon, parts["codebook"]),
                       eg.mul(parts["commit"], weights.beta_commit))
    return objective, {
        "total": float(total_recon.data), "pixel": float(pixel.data),
        "grad": float(grad_part.data), "feat": float(feat_part.data),
        "codebook": float(parts["codebook"].data), "commit": float(parts["commit"].data),
    }, idx


def train_tokenizer(train_images, weights: LossWeights, cfg: TokenizerConfig, phi,
                    val_images=None):
    """Optimize encoder, decoder and codebook; returns (tokenizer, curve, summary).

    curve rows: (step, total, pixel, grad, feat, codebook, commit).
    """
    train_images = np.asarray(train_images, dtype=np.float64)
    order_rng = make_rng(cfg.seed, "tokenizer-batches")
    seed_idx = make_rng(cfg.seed, "codebook-seed").choice(
        train_images.shape[0], size=min(train_images.shape[0], 64), replace=False)
    tok = init_tokenizer(cfg, train_images[seed_idx])
    tok.phi_hash = phi.weights_hash() if phi is not None else ""

    names, tensors = _all_params(tok)
    state = eg.AdamState()
    curve = []
    last_good = None
    window_usage = np.zeros(cfg.codebook_size, dtype=np.int64)
    reseed_rng = make_rng(cfg.seed, "codebook-reseed")
    reseed_every = 100
    for step in range(cfg.steps):
        idx = order_rng.integers(0, train_images.shape[0], size=cfg.batch)
        objective, parts, token_ids = tokenizer_step_loss(tok, train_images[idx], weights, phi)
        if not np.isfinite(objective.data):
            raise NumericFailure(
                f"tokenizer loss non-finite at step {step}", last_good=last_good, step=step)
        eg.backward(objective)
        _, tensors = _all_params(tok)
        updated, state = eg.adam_step(tensors, [t.grad for t in tensors], state, lr=cfg.lr)
        _put_params(tok, names, updated)
        curve.append((step, parts["total"], parts["pixel"], parts["grad"],
                      parts["feat"], parts["codebook"], parts["commit"]))

        window_usage += np.bincount(token_ids.reshape(-1), minlength=cfg.codebook_size)
        if (step + 1) % reseed_every == 0 and step + 1 < cfg.steps:
            # codes unused over the window restart at live encoder outputs,
            # the standard collapse counter-measure (not an EMA update)
            dead = np.flatnonzero(window_usage == 0)
            if dead.size:
                latents = encode(train_images[idx], tok.encoder, tok.cfg).data.reshape(-1, cfg.code_dim)
                pick = reseed_rng.integers(0, latents.shape[0], size=dead.size)
                new_codes = tok.codes.data.copy()
                new_codes[dead] = latents[pick] + reseed_rng.normal(0.0, 1e-3, size=(dead.size, cfg.code_dim))
                tok.codes = Tensor(new_codes, tracked=True)
                state.first_moment[-1][dead] = 0.0
                state.second_moment[-1][dead] = 0.0
            window_usage[:] = 0
        if step % 100 == 0:
            last_good = {"step": step}

    usage = np.zeros(cfg.codebook_size, dtype=np.int64)
    for start in range(0, train_images.shape[0], 256):
        ids = tok.tokenize_batch(train_images[start:start + 256])
        usage += np.bincount(ids.reshape(-1), minlength=cfg.codebook_size)
    tok.usage = usage
    live = float((usage > 0).mean())
    if live < 0.25:
        warnings.warn(f"dead-code alarm: only {live:.0%} of codes used on the training set")

    summary = {"live_code_fraction": live}
    if val_images is not None and len(val_images):
        summary["val"] = evaluate_tokenizer(tok, val_images, weights, phi)
    return tok, curve, summary


def evaluate_tokenizer(tok: Tokenizer, images, weights: LossWeights, phi) -> dict:
    images = np.asarray(images, dtype=np.float64)
    totals = np.zeros(4)
    batches = 0
    for start in range(0, images.shape[0], 64):
        chunk = images[start:start + 64]
        latents = encode(chunk, tok.encoder, tok.cfg)
        _, quantized, _ = quantize(latents, tok.codes)
        x_hat = decode(quantized, tok.decoder, tok.cfg)
        total, pixel, grad_part, feat_part = clinical_recon_loss(chunk, x_hat, weights, phi)
        totals += [float(total.data), float(pixel.data), float(grad_part.data), float(feat_part.data)]
        batches += 1
    totals /= max(1, batches)
    return {"total": totals[0], "pixel": totals[1], "grad": totals[2], "feat": totals[3]}
