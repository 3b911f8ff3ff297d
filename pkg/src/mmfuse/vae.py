"""Variational fusion of per-utterance modality features.

Encoder: h1 = relu(W F + b), mu = linear head, sigma = softplus head.
Sampling: z = mu + eps * sigma with eps ~ N(0, I).
Decoder: h3 = softplus(W z + b), F_hat = linear reconstruction.
Loss: 0.5 * mean ||F - F_hat||^2 plus the closed-form Gaussian KL
(the negative evidence lower bound, with the Gaussian likelihood's
constant terms dropped).

The same parameter shapes double as a plain autoencoder: z = mu
deterministically, no KL term, sigma head unused.
"""

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError
from .nn import DenseLayer, ParamStore


class DomainError(ValueError):
    pass


@dataclass
class ModalityFeatures:
    """One utterance's textual / acoustic / visual feature vectors."""
    f_t: np.ndarray
    f_a: np.ndarray
    f_v: np.ndarray


@dataclass
class LatentSample:
    mu: np.ndarray
    sigma: np.ndarray
    eps: np.ndarray
    z: np.ndarray


@dataclass
class ElboBreakdown:
    recon_term: float
    kl_term: float
    total_loss: float


def concat_modalities(m, dims=None):
    """Stack (textual, acoustic, visual) into one column vector."""
    parts = [("textual", np.asarray(m.f_t, dtype=np.float64).reshape(-1)),
             ("acoustic", np.asarray(m.f_a, dtype=np.float64).reshape(-1)),
             ("visual", np.asarray(m.f_v, dtype=np.float64).reshape(-1))]
    if dims is not None:
        for (name, vec), want in zip(parts, dims):
            if vec.size != want:
                raise ShapeError(
                    f"{name} feature length {vec.size} != expected {want}")
    return np.concatenate([vec for _, vec in parts]).reshape(-1, 1)


def gaussian_kl(mu, sigma):
    """KL(N(mu, diag(sigma^2)) || N(0, I)), averaged over batch columns."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise DomainError("sigma must be strictly positive")
    mu = np.asarray(mu, dtype=np.float64)
    per_item = 0.5 * (mu * mu + sigma * sigma - 1.0).sum(axis=0) \
        - np.log(sigma).sum(axis=0)
    return float(per_item.mean())


class VaeModel:
    """Encoder/decoder pair over concatenated modality features."""

    def __init__(self, d_in, d_h, d_z, rng, kl_weight=1.0):
        self.d_in = d_in
        self.d_h = d_h
        self.d_z = d_z
        self.kl_weight = kl_weight
        self.store = ParamStore()
        self.enc_h1 = DenseLayer(self.store, "enc.h1", d_in, d_h, "relu", rng)
        self.enc_mu = DenseLayer(self.store, "enc.mu", d_h, d_z, None, rng)
        self.enc_sigma = DenseLayer(self.store, "enc.sigma", d_h, d_z,
                                    "softplus", rng)
        self.dec_h3 = DenseLayer(self.store, "dec.h3", d_z, d_h, "softplus", rng)
        self.dec_out = DenseLayer(self.store, "dec.out", d_h, d_in, None, rng)

    # -- forward pieces -----------------------------------------------------

    def encode(self, F):
        if F.shape[0] != self.d_in:
            raise ShapeError(f"encode: input rows {F.shape[0]} != {self.d_in}")
        h1 = self.enc_h1.forward(F)
        mu = self.enc_mu.forward(h1)
        sigma = self.enc_sigma.forward(h1)
        return mu, sigma

    def reparameterize(self, mu, sigma, rng):
        if np.any(sigma <= 0):
            raise DomainError("sigma must be strictly positive")
        eps = rng.gaussian(*mu.shape)
        return LatentSample(mu=mu, sigma=sigma, eps=eps, z=mu + eps * sigma)

    def decode(self, z):
        if z.shape[0] != self.d_z:
            raise ShapeError(f"decode: input rows {z.shape[0]} != {self.d_z}")
        h3 = self.dec_h3.forward(z)
        return self.dec_out.forward(h3)

    def extract_latent(self, F, mode="mean", rng=None):
        """Fused representation: posterior mean (default) or one sample."""
        mu, sigma = self.encode(F)
        if mode == "mean":
            return mu
        if mode == "sample":
            if rng is None:
                raise ValueError("mode='sample' needs an rng")
            return self.reparameterize(mu, sigma, rng).z
        raise ValueError(f"unknown latent mode {mode!r}")

    # -- losses (forward + backward, gradients accumulated in the store) ----

    def elbo_loss(self, F, rng=None, eps=None, z_hook=None):
        """Negative ELBO for one batch; populates gradients via backward.

        `eps` overrides the Monte-Carlo draw (used by gradient checks);
        otherwise one sample per item is drawn from `rng`.  `z_hook`, if
        given, is called with the sampled z and must return an extra
        gradient wrt z (used for joint-objective training).
        """
        n = F.shape[1]
        mu, sigma = self.encode(F)
        if eps is None:
            if rng is None:
                raise ValueError("elbo_loss needs rng or explicit eps")
            eps = rng.gaussian(*mu.shape)
        z = mu + eps * sigma
        F_hat = self.decode(z)

        diff = F_hat - F
        recon = 0.5 * float((diff * diff).sum()) / n
        kl = self.kl_weight * gaussian_kl(mu, sigma)

        # backward: reconstruction path through decoder and reparameterization
        d_fhat = diff / n
        d_h3 = self.dec_out.backward(d_fhat)
        d_z = self.dec_h3.backward(d_h3)
        if z_hook is not None:
            d_z = d_z + z_hook(z)
        d_mu = d_z + self.kl_weight * mu / n
        d_sigma = d_z * eps + self.kl_weight * (sigma - 1.0 / sigma) / n
        d_h1 = self.enc_mu.backward(d_mu) + self.enc_sigma.backward(d_sigma)
        self.enc_h1.backward(d_h1)

        return ElboBreakdown(recon_term=recon, kl_term=kl,
                             total_loss=recon + kl)

    def elbo_forward(self, F, eps):
        """Forward-only negative ELBO with a frozen eps (for grad checks)."""
        mu, sigma = self.encode(F)
        z = mu + eps * sigma
        F_hat = self.decode(z)
        diff = F_hat - F
        recon = 0.5 * float((diff * diff).sum()) / F.shape[1]
        return recon + self.kl_weight * gaussian_kl(mu, sigma)

    def ae_loss(self, F):
        """Plain-autoencoder reconstruction loss: z = mu, no KL, no sampling."""
        n = F.shape[1]
        mu, _ = self.encode(F)
        F_hat = self.decode(mu)
        diff = F_hat - F
        recon = 0.5 * float((diff * diff).sum()) / n

        d_fhat = diff / n
        d_h3 = self.dec_out.backward(d_fhat)
        d_mu = self.dec_h3.backward(d_h3)
        d_h1 = self.enc_mu.backward(d_mu)
        self.enc_h1.backward(d_h1)
        return recon

    def ae_forward(self, F):
        mu, _ = self.encode(F)
        diff = self.decode(mu) - F
        return 0.5 * float((diff * diff).sum()) / F.shape[1]

    def reconstruction_mse(self, F):
        """Mean over items of ||F - F_hat||^2 using the deterministic z = mu."""
        mu, _ = self.encode(F)
        diff = self.decode(mu) - F
        return float((diff * diff).sum()) / F.shape[1]


def write_latent_csv(path, rows):
    """Write fused latents: video_id,utterance_index,label,z_0..z_{Dz-1}.

    `rows` is an iterable of (video_id, utterance_index, label, z_vector).
    """
    rows = list(rows)
    if not rows:
        raise ValueError("no latent rows to export")
    d_z = len(np.asarray(rows[0][3]).reshape(-1))
    with open(path, "w", newline="") as f:
        header = ["video_id", "utterance_index", "label"]
        header += [f"z_{j}" for j in range(d_z)]
        f.write(",".join(header) + "\n")
        for video_id, idx, label, z in rows:
            vals = np.asarray(z, dtype=np.float64).reshape(-1)
            cells = [video_id, str(idx), str(label)]
            cells += [f"{v:.17g}" for v in vals]
            f.write(",".join(cells) + "\n")
