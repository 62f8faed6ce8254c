"""Spectral analysis front end pieces.

Covers the fixed STFT path (framing, periodic Hann window, mel projection,
log compression, per-bin mean/variance normalization), the learnable
analytic filterbank whose imaginary impulse responses are the discrete
Hilbert transforms of the real ones, and the on-disk dump formats for
spectrograms and feature matrices.

Framing is left aligned with no center padding: frame t covers samples
[t*hop, t*hop + win), and the frame count is floor((N - win) / hop) + 1.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ArgumentError, FormatError, NumericError, RangeError
from .signal_io import MultichannelSignal

LOG_EPS = 1e-8
MVN_EPS = 1e-6

_DUMP_MAGIC = 0x41565350  # "AVSP"
_DUMP_VERSION = 1
_FLAG_COMPLEX = 1


@dataclass(frozen=True)
class StftConfig:
    """Analysis parameters. Sample counts derive from the signal rate."""

    win_s: float = 0.025
    hop_s: float = 0.010
    fft_size: int = 512
    window: str = "hann"

    def __post_init__(self):
        if self.win_s <= 0 or self.hop_s <= 0:
            raise ArgumentError("win_s and hop_s must be positive")
        if self.hop_s > self.win_s:
            raise ArgumentError("hop_s must not exceed win_s")
        if self.fft_size < 1:
            raise ArgumentError("fft_size must be positive")
        if self.window not in ("hann", "rect"):
            raise ArgumentError(f"unknown window {self.window!r}")

    def win_samples(self, rate):
        return int(round(self.win_s * rate))

    def hop_samples(self, rate):
        return int(round(self.hop_s * rate))

    @property
    def n_bins(self):
        return self.fft_size // 2 + 1


@dataclass(frozen=True)
class ComplexSpectrogram:
    """One-sided STFT-like representation, values (C, T, K) complex128."""

    values: np.ndarray
    sample_rate: int
    hop_s: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.complex128)
        if v.ndim != 3:
            raise ArgumentError(f"values must be (C, T, K), got ndim={v.ndim}")
        if not np.isfinite(v).all():
            raise NumericError("spectrogram contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def n_channels(self):
        return self.values.shape[0]

    @property
    def n_frames(self):
        return self.values.shape[1]

    @property
    def n_bins(self):
        return self.values.shape[2]


def frame_count(n_samples, win, hop):
    if n_samples < win:
        raise RangeError(f"signal of {n_samples} samples is shorter than one window ({win})")
    return (n_samples - win) // hop + 1


def _window_values(kind, win):
    if kind == "hann":
        # periodic form, matches an FFT analysis window of length `win`
        n = np.arange(win)
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / win)
    return np.ones(win)


def frame_signal(samples, win, hop):
    """Strided view (C, T, win) over (C, N) samples; no copies."""
    if samples.ndim != 2:
        raise ArgumentError("expected (channels, samples)")
    frame_count(samples.shape[1], win, hop)  # validates length
    view = sliding_window_view(samples, win, axis=1)
    return view[:, ::hop, :]


def stft(signal: MultichannelSignal, cfg: StftConfig) -> ComplexSpectrogram:
    """One-sided STFT of every channel, (C, T, K) with K = fft_size/2 + 1."""
    rate = signal.sample_rate
    win = cfg.win_samples(rate)
    hop = cfg.hop_samples(rate)
    if cfg.fft_size < win:
        raise ArgumentError(f"fft_size {cfg.fft_size} is smaller than the window ({win})")
    frames = frame_signal(signal.samples, win, hop) * _window_values(cfg.window, win)
    values = np.fft.rfft(frames, n=cfg.fft_size, axis=-1)
    return ComplexSpectrogram(values, rate, cfg.hop_s)


# -- mel projection -----------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (np.power(10.0, np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=16)
def mel_filterbank(n_mels, n_bins, rate):
    """(n_bins, n_mels) triangular weights, peak 1, not area normalized.

    Triangles are spaced evenly on the mel axis from 0 Hz to rate/2 and
    evaluated at the bin center frequencies of a one-sided spectrum.
    """
    if n_mels < 1:
        raise ArgumentError("n_mels must be >= 1")
    if n_mels > n_bins:
        raise ArgumentError(f"n_mels={n_mels} exceeds the number of bins ({n_bins})")
    edges = mel_to_hz(np.linspace(0.0, float(hz_to_mel(rate / 2.0)), n_mels + 2))
    freqs = np.linspace(0.0, rate / 2.0, n_bins)
    weights = np.zeros((n_bins, n_mels))
    for i in range(n_mels):
        lo, center, hi = edges[i], edges[i + 1], edges[i + 2]
        rising = (freqs - lo) / max(center - lo, 1e-12)
        falling = (hi - freqs) / max(hi - center, 1e-12)
        weights[:, i] = np.clip(np.minimum(rising, falling), 0.0, 1.0)
    return weights


def mel_project(mag, n_mels, rate):
    """Project magnitudes (..., K) onto n_mels triangular filters."""
    mag = np.asarray(mag, dtype=np.float64)
    weights = mel_filterbank(int(n_mels), mag.shape[-1], int(rate))
    return mag @ weights


def log_compress(x):
    """log(x + 1e-8); inputs must be nonnegative."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0):
        raise ArgumentError("log_compress expects nonnegative input")
    return np.log(x + LOG_EPS)


def mvn(x, time_axis=None):
    """Mean/variance normalize each bin across time.

    Population statistics; the denominator is std + 1e-6 so constant bins
    map to zeros. For (C, T, K) input the time axis defaults to 1, for
    (T, K) input to 0.
    """
    x = np.asarray(x, dtype=np.float64)
    if time_axis is None:
        time_axis = 1 if x.ndim == 3 else 0
    mean = x.mean(axis=time_axis, keepdims=True)
    std = x.std(axis=time_axis, keepdims=True)
    return (x - mean) / (std + MVN_EPS)


# -- learnable analytic filterbank --------------------------------------------


@functools.lru_cache(maxsize=8)
def hilbert_basis(kernel_len):
    """(L, L) matrix H with H @ h = imaginary part of the analytic signal.

    Built by pushing the identity through the spectral construction: zero
    the negative-frequency half, keep DC and Nyquist, double the positive
    half, inverse transform, take the imaginary part. Materializing the
    operator keeps the training-time transpose trivially available.
    """
    if kernel_len % 2 != 0:
        raise ArgumentError("analytic kernels must have even length")
    u = np.zeros(kernel_len)
    u[0] = 1.0
    u[1 : kernel_len // 2] = 2.0
    u[kernel_len // 2] = 1.0
    spectrum = np.fft.fft(np.eye(kernel_len), axis=0)
    analytic = np.fft.ifft(u[:, None] * spectrum, axis=0)
    return np.ascontiguousarray(analytic.imag)


def hilbert_imag(real_ir):
    """Imaginary impulse responses for rows of ``real_ir`` ((F, L) or (L,))."""
    real_ir = np.asarray(real_ir, dtype=np.float64)
    basis = hilbert_basis(real_ir.shape[-1])
    return real_ir @ basis.T


@dataclass(frozen=True)
class AnalyticFilterBank:
    """Bank of learnable analytic FIR filters applied with a fixed stride.

    Only ``real_ir`` is free; ``imag_ir`` is always the Hilbert transform of
    it, recomputed on access so the pair can never drift apart.
    """

    real_ir: np.ndarray
    stride: int
    sample_rate: int

    def __post_init__(self):
        ir = np.asarray(self.real_ir, dtype=np.float64)
        if ir.ndim != 2:
            raise ArgumentError("real_ir must be (n_filters, kernel_len)")
        if ir.shape[1] % 2 != 0:
            raise ArgumentError("kernel_len must be even")
        if self.stride < 1:
            raise ArgumentError("stride must be >= 1")
        object.__setattr__(self, "real_ir", ir)

    @property
    def imag_ir(self):
        return hilbert_imag(self.real_ir)

    @property
    def n_filters(self):
        return self.real_ir.shape[0]

    @property
    def kernel_len(self):
        return self.real_ir.shape[1]


def analytic_fb_init(n_filters, kernel_len, stride, sample_rate, seed=0):
    """Uniform init in [-1/sqrt(L), 1/sqrt(L)], deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(kernel_len)
    ir = rng.uniform(-bound, bound, size=(n_filters, kernel_len))
    return AnalyticFilterBank(ir, stride, sample_rate)


def analytic_fb_apply(signal: MultichannelSignal, bank: AnalyticFilterBank):
    """Strided complex filterbank outputs, (C, T, n_filters) complex128.

    T follows the same framing rule as the STFT with win = kernel_len and
    hop = stride, so bank features align frame for frame with STFT features
    when the sizes match.
    """
    if signal.sample_rate != bank.sample_rate:
        raise ArgumentError(
            f"bank built for {bank.sample_rate} Hz, signal is {signal.sample_rate} Hz"
        )
    frames = frame_signal(signal.samples, bank.kernel_len, bank.stride)
    real = np.einsum("ctl,fl->ctf", frames, bank.real_ir)
    imag = np.einsum("ctl,fl->ctf", frames, bank.imag_ir)
    return real + 1j * imag


# -- dump formats -------------------------------------------------------------


def write_spectral_binary(path, values, sample_rate, hop_s):
    """Raw little-endian float64 dump with an 8-value int64 header.

    Header: magic, version, C, T, K, sample_rate, hop in microseconds, flags.
    Flag bit 0 marks complex data (interleaved re/im pairs).
    """
    values = np.asarray(values)
    if values.ndim != 3:
        raise ArgumentError("expected (C, T, K) values")
    is_complex = np.iscomplexobj(values)
    flags = _FLAG_COMPLEX if is_complex else 0
    header = np.array(
        [
            _DUMP_MAGIC,
            _DUMP_VERSION,
            values.shape[0],
            values.shape[1],
            values.shape[2],
            int(sample_rate),
            int(round(hop_s * 1e6)),
            flags,
        ],
        dtype="<i8",
    )
    if is_complex:
        payload = np.ascontiguousarray(values.astype(np.complex128)).view(np.float64)
    else:
        payload = values.astype(np.float64)
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(payload.astype("<f8").tobytes())


def read_spectral_binary(path):
    """Inverse of write_spectral_binary; returns (values, sample_rate, hop_s)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 64:
        raise FormatError("spectral dump truncated before header end")
    header = np.frombuffer(raw[:64], dtype="<i8")
    if header[0] != _DUMP_MAGIC:
        raise FormatError(f"bad magic 0x{int(header[0]):x} in spectral dump")
    if header[1] != _DUMP_VERSION:
        raise FormatError(f"unsupported spectral dump version {int(header[1])}")
    c, t, k = (int(x) for x in header[2:5])
    rate, hop_us, flags = int(header[5]), int(header[6]), int(header[7])
    n_values = c * t * k * (2 if flags & _FLAG_COMPLEX else 1)
    body = np.frombuffer(raw[64:], dtype="<f8")
    if body.size != n_values:
        raise FormatError(f"expected {n_values} float64 values, found {body.size}")
    if flags & _FLAG_COMPLEX:
        values = body.view(np.complex128).reshape(c, t, k)
    else:
        values = body.reshape(c, t, k)
    return values.copy(), rate, hop_us / 1e6


def write_features_csv(path, features, names=None):
    """Feature matrix (T, F) as CSV: one row per frame, named columns."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ArgumentError("expected a (frames, features) matrix")
    if names is None:
        names = [f"bin_{i}" for i in range(features.shape[1])]
    if len(names) != features.shape[1]:
        raise ArgumentError("one name per feature column required")
    with open(path, "w") as fh:
        fh.write("frame," + ",".join(names) + "\n")
        for t, row in enumerate(features):
            fh.write(str(t) + "," + ",".join(f"{v:.17g}" for v in row) + "\n")


def read_features_csv(path):
    """Inverse of write_features_csv; returns (features, names)."""
    with open(path) as fh:
        header = fh.readline().strip()
        if not header.startswith("frame,"):
            raise FormatError("feature CSV must start with a 'frame,...' header")
        names = header.split(",")[1:]
        rows = []
        for line in fh:
            parts = line.strip().split(",")
            rows.append([float(v) for v in parts[1:]])
    return np.array(rows, dtype=np.float64), names
