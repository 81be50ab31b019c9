"""Hidden-confounder boundary branch.

Splits an observation history into high- and low-frequency components with
complementary Gaussian filters, convolves each component in the spectral
domain, transforms back, encodes with a recurrent layer, and maps each step
through a spectrally-normalized (1-Lipschitz) linear head to the inferred
confounder sequence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn


class SpectralError(ValueError):
    pass


@dataclass(frozen=True)
class FilterSpec:
    """Gaussian filter cutoff and transform length."""

    cutoff_d0: float
    num_bins: int

    def __post_init__(self) -> None:
        if self.cutoff_d0 <= 0:
            raise SpectralError(f"cutoff_d0 must be positive, got {self.cutoff_d0}")
        if self.num_bins < 2:
            raise SpectralError(f"num_bins must be >= 2, got {self.num_bins}")

    @classmethod
    def for_length(cls, n: int, cutoff_d0: float | None = None) -> "FilterSpec":
        """Spec for an n-point transform; default cutoff is one octave, n/8."""
        return cls(cutoff_d0=cutoff_d0 if cutoff_d0 is not None else n / 8.0, num_bins=n)


def gaussian_filter_response(d, d0: float, kind: str):
    """Gaussian filter weight at frequency distance ``d`` with cutoff ``d0``.

    ``kind='low'`` gives exp(-d^2 / (2 d0^2)); ``kind='high'`` its complement.
    Accepts scalars or numpy arrays.
    """
    if d0 <= 0:
        raise SpectralError(f"cutoff d0 must be positive, got {d0}")
    low = np.exp(-np.square(np.asarray(d, dtype=float)) / (2.0 * d0 * d0))
    if kind == "low":
        out = low
    elif kind == "high":
        out = 1.0 - low
    else:
        raise SpectralError(f"kind must be 'high' or 'low', got {kind!r}")
    return out if isinstance(d, np.ndarray) else float(out)


def centered_bin_distances(n: int) -> np.ndarray:
    """|integer frequency index| per bin after centering the spectrum."""
    return np.abs(np.fft.fftshift(np.fft.fftfreq(n) * n))


def spectral_split(sequence: Tensor, spec: FilterSpec) -> tuple[Tensor, Tensor]:
    """Centered DFT of a (time, channels) sequence split by the Gaussian filters.

    Returns complex (high_spectrum, low_spectrum); the two sum to the full
    centered spectrum because the filters are complementary.
    """
    if sequence.ndim != 2:
        raise SpectralError(f"expected (time, channels), got shape {tuple(sequence.shape)}")
    if sequence.shape[0] != spec.num_bins:
        raise SpectralError(
            f"sequence length {sequence.shape[0]} != spec.num_bins {spec.num_bins}"
        )
    if not torch.isfinite(sequence).all():
        raise SpectralError("non-finite values in input sequence")
    freq = torch.fft.fftshift(torch.fft.fft(sequence, dim=0), dim=0)
    d = centered_bin_distances(spec.num_bins)
    low_w = torch.as_tensor(
        gaussian_filter_response(d, spec.cutoff_d0, "low"),
        dtype=sequence.dtype, device=sequence.device,
    )[:, None]
    return freq * (1.0 - low_w), freq * low_w


def inverse_spectrum(spectrum: Tensor) -> Tensor:
    """Real time-domain signal from a centered spectrum."""
    return torch.fft.ifft(torch.fft.ifftshift(spectrum, dim=0), dim=0).real


def power_iteration(
    weight: Tensor,
    iters: int | None = None,
    start_vec: Tensor | None = None,
    tol: float = 1e-12,
    max_iters: int = 10_000,
) -> tuple[float, Tensor]:
    """Top singular value of a matrix by power iteration.

    Runs a fixed ``iters`` count, or to convergence of the estimate when
    ``iters`` is None. Returns (estimate, final left singular vector); the
    vector can warm-start the next call.
    """
    if weight.ndim != 2 or weight.numel() == 0:
        raise SpectralError(f"expected a non-empty matrix, got shape {tuple(weight.shape)}")
    if iters is not None and iters < 1:
        raise SpectralError(f"iters must be >= 1, got {iters}")
    with torch.no_grad():
        m, _ = weight.shape
        if start_vec is not None and start_vec.shape == (m,):
            u = start_vec.to(weight.dtype) / max(float(start_vec.norm()), 1e-30)
        else:
            u = torch.full((m,), 1.0 / np.sqrt(m), dtype=weight.dtype, device=weight.device)
        sigma = 0.0
        n_steps = iters if iters is not None else max_iters
        for step in range(n_steps):
            v = weight.T @ u
            v = v / max(float(v.norm()), 1e-30)
            u = weight @ v
            u = u / max(float(u.norm()), 1e-30)
            new_sigma = float(u @ (weight @ v))
            if iters is None and step > 0 and abs(new_sigma - sigma) <= tol * max(1.0, abs(new_sigma)):
                sigma = new_sigma
                break
            sigma = new_sigma
        return sigma, u


def spectral_norm_project(
    weight: Tensor, iters: int | None = None, start_vec: Tensor | None = None
) -> Tensor:
    """Scale a matrix so its spectral norm is at most 1 (no-op if already inside)."""
    sigma, _ = power_iteration(weight, iters=iters, start_vec=start_vec)
    return weight / max(1.0, sigma)


class LipschitzLinear(nn.Module):
    """Linear layer whose weight is kept inside the unit spectral-norm ball.

    The projection is applied explicitly (after optimizer steps) via
    ``project_``; the bias does not affect the Lipschitz constant and is left
    unconstrained.
    """

    def __init__(self, in_features: int, out_features: int, target_bound: float = 1.0):
        super().__init__()
        self.linear = nn.Linear(in_features, out_features)
        self.target_bound = target_bound
        self.register_buffer(
            "power_iter_vec",
            torch.full((out_features,), 1.0 / np.sqrt(out_features)),
        )

    @property
    def weight(self) -> Tensor:
        return self.linear.weight

    @property
    def bias(self) -> Tensor:
        return self.linear.bias

    def project_(self, iters: int | None = None) -> float:
        """In-place spectral projection; returns the norm estimate."""
        sigma, u = power_iteration(
            self.linear.weight.data, iters=iters, start_vec=self.power_iter_vec
        )
        scale = sigma / self.target_bound
        if scale > 1.0:
            self.linear.weight.data.div_(scale)
        self.power_iter_vec.copy_(u.to(self.power_iter_vec.dtype))
        return sigma

    def forward(self, x: Tensor) -> Tensor:
        return self.linear(x)


@dataclass
class BoundaryBranchOutput:
    z_hat: Tensor          # (time, z_dim) inferred confounders
    encoder_state: Tensor  # final hidden state of the recurrent encoder


def boundary_forward(
    history: Tensor,
    spec: FilterSpec,
    conv_high: nn.Conv1d,
    conv_low: nn.Conv1d,
    encoder: nn.GRU,
    head: LipschitzLinear,
    *,
    drop_high: bool = False,
    drop_low: bool = False,
) -> BoundaryBranchOutput:
    """Full boundary-branch pass over one index-regular history (time, channels).

    Time gaps are deliberately ignored here; true timestamps re-enter through
    the control path of the downstream integrator.
    """
    high, low = spectral_split(history, spec)
    if drop_high:
        high = torch.zeros_like(high)
    if drop_low:
        low = torch.zeros_like(low)

    def conv_complex(spectrum: Tensor, conv: nn.Conv1d) -> Tensor:
        stacked = torch.cat([spectrum.real.T, spectrum.imag.T], dim=0)[None]  # (1, 2C, T)
        out = conv(stacked)[0]
        c = spectrum.shape[1]
        return torch.complex(out[:c].T, out[c:].T)

    mixed = conv_complex(high, conv_high) + conv_complex(low, conv_low)
    signal = inverse_spectrum(mixed)                     # (T, C)
    encoded, h_n = encoder(signal[None])                 # (1, T, H)
    z_hat = head(encoded[0])                             # (T, z_dim)
    return BoundaryBranchOutput(z_hat=z_hat, encoder_state=h_n[-1, 0])


class BoundaryBranch(nn.Module):
    """Learnable components of the boundary branch bundled as one module."""

    def __init__(
        self,
        in_channels: int,
        z_dim: int = 1,
        rnn_hidden: int = 32,
        cutoff_d0: float | None = None,
        conv_kernel: int = 3,
    ):
        super().__init__()
        if conv_kernel % 2 != 1:
            raise SpectralError("conv kernel size must be odd to preserve length")
        pad = conv_kernel // 2
        self.in_channels = in_channels
        self.cutoff_d0 = cutoff_d0
        self.conv_high = nn.Conv1d(2 * in_channels, 2 * in_channels, conv_kernel, padding=pad)
        self.conv_low = nn.Conv1d(2 * in_channels, 2 * in_channels, conv_kernel, padding=pad)
        self.encoder = nn.GRU(in_channels, rnn_hidden, batch_first=True)
        self.head = LipschitzLinear(rnn_hidden, z_dim)

    def forward(
        self, history: Tensor, *, drop_high: bool = False, drop_low: bool = False
    ) -> BoundaryBranchOutput:
        spec = FilterSpec.for_length(history.shape[0], self.cutoff_d0)
        return boundary_forward(
            history, spec, self.conv_high, self.conv_low, self.encoder, self.head,
            drop_high=drop_high, drop_low=drop_low,
        )

    def project_(self, iters: int | None = None) -> float:
        return self.head.project_(iters=iters)
