"""Generative prior: codec, noise predictors, and the latent-to-image map.

The generative map is decode(project(sample(v))): run the deterministic
reverse-diffusion sampler on the concatenated latent, drop the conditioning
slot, and decode the diffusion slot to an image.  Both reference codecs are
linear with orthonormal analysis rows, so the decoder adjoint IS the encoder;
the hand-written vector-Jacobian product below relies on that and on each
predictor supplying an input-gradient rule.

Predictors available:

* ``ZeroPredictor``      - predicts no noise; the map reduces to a rescaled slice.
* ``GaussianPriorPredictor`` - exact conditional-mean noise estimate when the
  clean latent is N(mean, tau^2 I); analytically differentiable.
* ``MLPPredictor``       - small dense network over [a, z_t, t/T] with tanh
  activations, trained by Adam on the standard noise-matching loss.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import scipy.fft

from .diffusion import LatentState, NoiseSchedule, reverse_diffusion, reverse_diffusion_trajectory

__all__ = [
    "IdentityCodec",
    "BlockDCTCodec",
    "analytic_eps",
    "ZeroPredictor",
    "GaussianPriorPredictor",
    "MLPPredictor",
    "generative_map",
    "generative_map_vjp",
    "train_predictor",
    "make_denoising_dataset",
    "TrainingDivergedError",
]


# --------------------------------------------------------------------------
# Codecs
# --------------------------------------------------------------------------

class IdentityCodec:
    """Flatten/reshape codec; decode(encode(x)) == x exactly."""

    def __init__(self, image_shape: tuple[int, ...]):
        self.image_shape = tuple(int(s) for s in image_shape)
        self.latent_size = int(np.prod(self.image_shape))

    def encode(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        if image.shape != self.image_shape:
            raise ValueError(f"codec expects shape {self.image_shape}, got {image.shape}")
        return image.ravel().copy()

    def decode(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.size != self.latent_size:
            raise ValueError(f"latent size {z.size} != {self.latent_size}")
        return z.reshape(self.image_shape).copy()

    def __repr__(self) -> str:
        return f"IdentityCodec({self.image_shape})"


class BlockDCTCodec:
    """Blockwise orthonormal cosine transform keeping the lowest frequencies.

    Within each block the 2-D DCT-II coefficients are ordered by diagonal
    (u+v, then u) and the first ``kept`` are retained.  encode has orthonormal
    rows, hence decode(encode(x)) is an orthogonal projection and
    <decode(z), x> == <z, encode(x)>.
    """

    def __init__(self, image_shape: tuple[int, ...], block_size: int = 8, kept: int = 10):
        self.image_shape = tuple(int(s) for s in image_shape)
        h, w = self.image_shape[0], self.image_shape[1]
        self.channels = self.image_shape[2] if len(self.image_shape) == 3 else 1
        if h % block_size or w % block_size:
            raise ValueError(f"image shape {self.image_shape} not divisible by block {block_size}")
        if not 1 <= kept <= block_size * block_size:
            raise ValueError(f"kept must be in 1..{block_size * block_size}, got {kept}")
        self.block_size = int(block_size)
        self.kept = int(kept)
        self.nbh, self.nbw = h // block_size, w // block_size
        # orthonormal 1-D DCT-II matrix: basis @ x == dct(x, norm='ortho')
        self.basis = scipy.fft.dct(np.eye(block_size), axis=0, norm="ortho")
        order = sorted(
            range(block_size * block_size),
            key=lambda f: (f // block_size + f % block_size, f // block_size),
        )
        self.keep_idx = np.array(order[: self.kept])
        self.latent_size = self.channels * self.nbh * self.nbw * self.kept

    def _to_blocks(self, chan: np.ndarray) -> np.ndarray:
        bs = self.block_size
        return chan.reshape(self.nbh, bs, self.nbw, bs).transpose(0, 2, 1, 3)

    def _from_blocks(self, blocks: np.ndarray) -> np.ndarray:
        bs = self.block_size
        return blocks.transpose(0, 2, 1, 3).reshape(self.nbh * bs, self.nbw * bs)

    def encode(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        if image.shape != self.image_shape:
            raise ValueError(f"codec expects shape {self.image_shape}, got {image.shape}")
        chans = image[..., None] if image.ndim == 2 else image
        out = []
        for c in range(self.channels):
            blocks = self._to_blocks(chans[:, :, c])
            coeff = np.einsum("ij,abjk,lk->abil", self.basis, blocks, self.basis)
            out.append(coeff.reshape(self.nbh, self.nbw, -1)[:, :, self.keep_idx].ravel())
        return np.concatenate(out)

    def decode(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.size != self.latent_size:
            raise ValueError(f"latent size {z.size} != {self.latent_size}")
        bs = self.block_size
        per_chan = z.reshape(self.channels, self.nbh, self.nbw, self.kept)
        chans = []
        for c in range(self.channels):
            coeff = np.zeros((self.nbh, self.nbw, bs * bs))
            coeff[:, :, self.keep_idx] = per_chan[c]
            blocks = np.einsum("ji,abjk,kl->abil", self.basis, coeff.reshape(self.nbh, self.nbw, bs, bs), self.basis)
            chans.append(self._from_blocks(blocks))
        img = np.stack(chans, axis=2)
        return img[:, :, 0] if len(self.image_shape) == 2 else img

    def __repr__(self) -> str:
        return f"BlockDCTCodec({self.image_shape}, block={self.block_size}, kept={self.kept})"


# --------------------------------------------------------------------------
# Predictors
# --------------------------------------------------------------------------

def analytic_eps(z_t: np.ndarray, alpha_bar_t: float, m: np.ndarray, tau: float) -> np.ndarray:
    """Conditional-mean noise estimate for clean latents distributed N(m, tau^2 I):

        sqrt(1-ab) (z_t - sqrt(ab) m) / (ab tau^2 + 1 - ab)
    """
    if not 0.0 < alpha_bar_t <= 1.0:
        raise ValueError(f"alpha_bar_t must be in (0, 1], got {alpha_bar_t}")
    if tau < 0:
        raise ValueError(f"tau must be >= 0, got {tau}")
    denom = alpha_bar_t * tau * tau + 1.0 - alpha_bar_t
    if denom == 0.0:
        raise ValueError("degenerate predictor: tau = 0 with alpha_bar_t = 1")
    return np.sqrt(1.0 - alpha_bar_t) * (np.asarray(z_t) - np.sqrt(alpha_bar_t) * np.asarray(m)) / denom


class ZeroPredictor:
    """Predicts zero noise everywhere; gradient rule is identically zero."""

    def __init__(self, s2: int):
        self.s2 = int(s2)

    def __call__(self, state: LatentState, t: int) -> np.ndarray:
        return np.zeros(self.s2)

    def vjp_inputs(self, state: LatentState, t: int, w: np.ndarray):
        return np.zeros(state.s1), np.zeros(state.s2)


class GaussianPriorPredictor:
    """Closed-form optimal predictor for a Gaussian latent prior N(mean, tau^2 I).

    Ignores the conditioning slot; its z-Jacobian is the scalar
    sqrt(1-ab) / (ab tau^2 + 1 - ab) times the identity.
    """

    def __init__(self, mean: np.ndarray, tau: float, schedule: NoiseSchedule):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        if tau < 0:
            raise ValueError(f"tau must be >= 0, got {tau}")
        self.tau = float(tau)
        self.schedule = schedule

    def __call__(self, state: LatentState, t: int) -> np.ndarray:
        return analytic_eps(state.z, self.schedule.alpha_bar_at(t), self.mean, self.tau)

    def _gain(self, t: int) -> float:
        ab = self.schedule.alpha_bar_at(t)
        denom = ab * self.tau * self.tau + 1.0 - ab
        if denom == 0.0:
            raise ValueError("degenerate predictor: tau = 0 with alpha_bar_t = 1")
        return np.sqrt(1.0 - ab) / denom

    def vjp_inputs(self, state: LatentState, t: int, w: np.ndarray):
        return np.zeros(state.s1), self._gain(t) * np.asarray(w)


class MLPPredictor:
    """Dense tanh network predicting noise through a velocity correction.

    The dense core (three layers, two tanh hidden layers, hand-written
    forward/backward) maps standardized features [a, z_t, t/T] to a velocity
    estimate; the noise estimate then follows from the schedule's exact
    coefficients:

        v_hat   = core([a, z_t, t/T]) + v_skip
        eps_hat = sqrt(ab_t) * v_hat + sqrt(1 - ab_t) * z_t

    where v_skip = (sqrt(ab_t) z_t - a)/sqrt(1 - ab_t) whenever the
    conditioning lives in the same latent space as the diffusion slot (it is
    the exact velocity if the clean latent equals the conditioning), and 0
    otherwise.  The velocity form keeps both the implied noise and the implied
    clean estimate within a bounded factor of the core's error at every
    timestep, and a zero core already reproduces the optimal predictor for
    unit Gaussian latents.  Everything is smooth, so finite-difference checks
    of the input gradients are clean.
    """

    KIND = "mlp-eps-predictor"

    def __init__(
        self,
        weights,
        s1: int,
        s2: int,
        alpha_bar: np.ndarray,
        seed: int = 0,
        schedule_hash: str = "",
        in_shift: np.ndarray | None = None,
        in_scale: np.ndarray | None = None,
    ):
        self.weights = [(np.asarray(W, dtype=np.float64), np.asarray(b, dtype=np.float64)) for W, b in weights]
        self.s1, self.s2 = int(s1), int(s2)
        self.alpha_bar = np.asarray(alpha_bar, dtype=np.float64)
        self.seed = int(seed)
        self.schedule_hash = schedule_hash
        n_in = self.weights[0][0].shape[0]
        self.in_shift = np.zeros(n_in) if in_shift is None else np.asarray(in_shift, dtype=np.float64)
        self.in_scale = np.ones(n_in) if in_scale is None else np.asarray(in_scale, dtype=np.float64)
        self.loss_trace: np.ndarray | None = None

    @property
    def T(self) -> int:
        return int(self.alpha_bar.size - 1)

    @classmethod
    def initialize(cls, s1: int, s2: int, hidden: int, schedule: NoiseSchedule, seed: int) -> "MLPPredictor":
        rng = np.random.default_rng(seed)
        sizes = [s1 + s2 + 1, hidden, hidden, s2]
        weights = []
        for nin, nout in zip(sizes[:-1], sizes[1:]):
            scale = np.sqrt(2.0 / (nin + nout))
            weights.append((scale * rng.standard_normal((nin, nout)), np.zeros(nout)))
        return cls(
            weights, s1, s2, schedule.alpha_bar.copy(),
            seed=seed, schedule_hash=schedule.content_hash(),
        )

    def set_input_standardization(self, shift: np.ndarray, scale: np.ndarray) -> None:
        n_in = self.weights[0][0].shape[0]
        shift = np.asarray(shift, dtype=np.float64)
        scale = np.asarray(scale, dtype=np.float64)
        if shift.shape != (n_in,) or scale.shape != (n_in,):
            raise ValueError(f"standardization vectors must have length {n_in}")
        self.in_shift, self.in_scale = shift, scale

    # -- dense core ------------------------------------------------------------

    def _core_forward(self, X: np.ndarray):
        (W1, b1), (W2, b2), (W3, b3) = self.weights
        Xn = (X - self.in_shift) * self.in_scale
        h1 = np.tanh(Xn @ W1 + b1)
        h2 = np.tanh(h1 @ W2 + b2)
        out = h2 @ W3 + b3
        return out, (Xn, h1, h2)

    def _core_backward(self, cache, dOut: np.ndarray):
        Xn, h1, h2 = cache
        (W1, _), (W2, _), (W3, _) = self.weights
        dh2 = dOut @ W3.T
        dz2 = dh2 * (1.0 - h2 * h2)
        dh1 = dz2 @ W2.T
        dz1 = dh1 * (1.0 - h1 * h1)
        dX = (dz1 @ W1.T) * self.in_scale
        grads = [
            (Xn.T @ dz1, dz1.sum(axis=0)),
            (h1.T @ dz2, dz2.sum(axis=0)),
            (h2.T @ dOut, dOut.sum(axis=0)),
        ]
        return dX, grads

    # -- noise prediction --------------------------------------------------------

    @property
    def _has_skip(self) -> bool:
        # the conditioning baseline only makes sense when both slots share the
        # same latent space
        return self.s1 == self.s2

    def eps_batch(self, A: np.ndarray, Z: np.ndarray, t: np.ndarray):
        """Batched noise estimate; returns (eps_hat, cache) for backprop."""
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise IndexError(f"timesteps must lie in 1..{self.T}")
        ab = self.alpha_bar[t]
        X = np.concatenate([A, Z, (t / self.T)[:, None]], axis=1)
        out, core_cache = self._core_forward(X)
        root_ab = np.sqrt(ab)[:, None]
        root_1mab = np.sqrt(1.0 - ab)[:, None]
        v_hat = out + (root_ab * Z - A) / root_1mab if self._has_skip else out
        eps_hat = root_ab * v_hat + root_1mab * Z
        return eps_hat, (core_cache, root_ab, root_1mab)

    def eps_backward(self, cache, dEps: np.ndarray):
        """Returns (dA, dZ, param_grads) for a cached eps_batch call."""
        core_cache, root_ab, root_1mab = cache
        dV = root_ab * dEps
        dZ = root_1mab * dEps
        dX, grads = self._core_backward(core_cache, dV)
        dA = dX[:, : self.s1]
        if self._has_skip:
            dA = dA - dV / root_1mab
            dZ = dZ + (root_ab / root_1mab) * dV
        dZ = dZ + dX[:, self.s1 : self.s1 + self.s2]
        return dA, dZ, grads

    def __call__(self, state: LatentState, t: int) -> np.ndarray:
        if state.s1 != self.s1 or state.s2 != self.s2:
            raise ValueError(
                f"state sizes ({state.s1}, {state.s2}) != predictor sizes ({self.s1}, {self.s2})"
            )
        eps, _ = self.eps_batch(state.a[None, :], state.z[None, :], np.array([t]))
        return eps[0]

    def vjp_inputs(self, state: LatentState, t: int, w: np.ndarray):
        _, cache = self.eps_batch(state.a[None, :], state.z[None, :], np.array([t]))
        dA, dZ, _ = self.eps_backward(cache, np.asarray(w, dtype=np.float64)[None, :])
        return dA[0].copy(), dZ[0].copy()

    # -- serialization ---------------------------------------------------------

    def save(self, path: str | Path) -> None:
        arrays = {"kind": np.array(self.KIND)}
        sizes = [self.weights[0][0].shape[0]] + [W.shape[1] for W, _ in self.weights]
        arrays["layer_sizes"] = np.array(sizes)
        arrays["meta"] = np.array([self.s1, self.s2, self.seed])
        arrays["schedule_hash"] = np.array(self.schedule_hash)
        arrays["alpha_bar"] = self.alpha_bar
        arrays["params"] = self.params_flat()
        arrays["in_shift"] = self.in_shift
        arrays["in_scale"] = self.in_scale
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "MLPPredictor":
        with np.load(path, allow_pickle=False) as data:
            if str(data["kind"]) != cls.KIND:
                raise IOError(f"{path} is not a saved predictor (kind={data['kind']})")
            sizes = data["layer_sizes"].tolist()
            s1, s2, seed = data["meta"].tolist()
            flat = data["params"]
            schedule_hash = str(data["schedule_hash"])
            alpha_bar = data["alpha_bar"]
            in_shift = data["in_shift"]
            in_scale = data["in_scale"]
        weights = []
        pos = 0
        for nin, nout in zip(sizes[:-1], sizes[1:]):
            W = flat[pos : pos + nin * nout].reshape(nin, nout)
            pos += nin * nout
            b = flat[pos : pos + nout]
            pos += nout
            weights.append((W, b))
        return cls(
            weights, s1, s2, alpha_bar, seed=seed, schedule_hash=schedule_hash,
            in_shift=in_shift, in_scale=in_scale,
        )

    def params_flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in self.weights])


# --------------------------------------------------------------------------
# Generative map and its vector-Jacobian product
# --------------------------------------------------------------------------

def generative_map(
    state: LatentState,
    steps: int,
    predictor,
    schedule: NoiseSchedule,
    codec,
) -> np.ndarray:
    """decode(project(sample(v))): image produced by the prior at latent v."""
    v0 = reverse_diffusion(state, steps, predictor, schedule)
    return codec.decode(v0.z)


def _step_coeffs(schedule: NoiseSchedule, i: int) -> tuple[float, float]:
    ab_i = schedule.alpha_bar_at(i)
    ab_p = schedule.alpha_bar_at(i - 1)
    c1 = np.sqrt(ab_p / ab_i)
    c2 = np.sqrt(1.0 - ab_p) - c1 * np.sqrt(1.0 - ab_i)
    return c1, c2


def generative_map_vjp(
    state: LatentState,
    w: np.ndarray,
    steps: int,
    predictor,
    schedule: NoiseSchedule,
    codec,
) -> LatentState:
    """J^T w for the generative map, differentiated through every sampler step.

    Gradients flow into the diffusion slot through the step recursion
    z_{i-1} = c1 z_i + c2 eps_hat and into the conditioning slot through the
    predictor at every one of the ``steps`` evaluations.
    """
    if not hasattr(predictor, "vjp_inputs"):
        raise TypeError(f"predictor {predictor!r} does not provide an input-gradient rule")
    traj = reverse_diffusion_trajectory(state, steps, predictor, schedule)
    gz = codec.encode(np.asarray(w, dtype=np.float64))  # decoder adjoint
    ga = np.zeros(state.s1)
    for i in range(1, steps + 1):
        st = traj[steps - i]  # state the predictor saw at step i
        c1, c2 = _step_coeffs(schedule, i)
        da, dz = predictor.vjp_inputs(st, i, c2 * gz)
        gz = c1 * gz + dz
        ga = ga + da
    return LatentState(ga, gz)


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------

class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(message)
        self.step = step


class _Adam:
    def __init__(self, shapes, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.k = 0

    def update(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.k += 1
        b1c = 1.0 - self.beta1 ** self.k
        b2c = 1.0 - self.beta2 ** self.k
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def train_predictor(
    dataset,
    schedule: NoiseSchedule,
    steps: int,
    seed: int,
    *,
    hidden: int = 64,
    batch_size: int = 32,
    lr: float = 1e-3,
) -> MLPPredictor:
    """Train a dense noise predictor on (clean latent, conditioning) pairs.

    Each step draws a minibatch, a uniform timestep per sample, fresh noise,
    forms z_t through the forward marginal, and takes one Adam step on the
    mean squared error between the predicted and drawn noise.  Deterministic
    per seed; the per-step loss is recorded on the returned predictor.
    """
    pairs = list(dataset)
    if not pairs:
        raise ValueError("dataset must be nonempty")
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    z0s = np.stack([np.atleast_1d(np.asarray(z, dtype=np.float64)) for z, _ in pairs])
    conds = np.stack([np.atleast_1d(np.asarray(a, dtype=np.float64)) for _, a in pairs])
    n, s2 = z0s.shape
    s1 = conds.shape[1]

    rng = np.random.default_rng(seed)
    net = MLPPredictor.initialize(s1, s2, hidden, schedule, seed)

    # fix the input standardization from a calibration draw of the training
    # distribution before any optimization
    calib = 2048
    idx = rng.integers(0, n, size=calib)
    t = rng.integers(1, schedule.T + 1, size=calib)
    eps = rng.standard_normal((calib, s2))
    ab = schedule.alpha_bar[t]
    zt = np.sqrt(ab)[:, None] * z0s[idx] + np.sqrt(1.0 - ab)[:, None] * eps
    feats = np.concatenate([conds[idx], zt, (t / schedule.T)[:, None]], axis=1)
    net.set_input_standardization(
        feats.mean(axis=0), 1.0 / np.maximum(feats.std(axis=0), 1e-3)
    )

    params = [arr for pair in net.weights for arr in pair]
    adam = _Adam([p.shape for p in params], lr=lr)

    losses = np.empty(steps)
    for step in range(steps):
        idx = rng.integers(0, n, size=batch_size)
        t = rng.integers(1, schedule.T + 1, size=batch_size)
        eps = rng.standard_normal((batch_size, s2))
        ab = schedule.alpha_bar[t]
        zt = np.sqrt(ab)[:, None] * z0s[idx] + np.sqrt(1.0 - ab)[:, None] * eps
        y, cache = net.eps_batch(conds[idx], zt, t)
        diff = y - eps
        loss = float(np.mean(diff * diff))
        if not np.isfinite(loss):
            raise TrainingDivergedError(step, f"training loss became non-finite at step {step}")
        losses[step] = loss
        _, _, grads = net.eps_backward(cache, 2.0 * diff / diff.size)
        adam.update(params, [g for pair in grads for g in pair])

    net.loss_trace = losses
    return net


def make_denoising_dataset(
    images,
    codec,
    sigma_max: float = 0.25,
    seed: int = 0,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Build (clean latent, conditioning) pairs for denoising-style training.

    The conditioning of each pair is the encoding of the clean image corrupted
    by Gaussian noise with a std drawn uniformly from [0, sigma_max].
    """
    rng = np.random.default_rng(seed)
    pairs = []
    for img in images:
        img = np.asarray(img, dtype=np.float64)
        sigma = rng.uniform(0.0, sigma_max)
        noisy = img + sigma * rng.standard_normal(img.shape)
        pairs.append((codec.encode(img), codec.encode(noisy)))
    return pairs
