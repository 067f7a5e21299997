"""RF frames, analytic signals and the three-channel input representation."""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

MIN_ROWS = 64
MIN_COLS = 16


@dataclass(frozen=True)
class RfFrame:
    """A 2-D grid of RF samples indexed ``(axial, lateral)``.

    Parameters
    ----------
    samples : ndarray, shape (rows, cols)
        Real RF samples; each column is one A-line.
    fs : float
        Sampling frequency in Hz.
    fc : float
        Transducer center frequency in Hz.
    c : float
        Sound speed in m/s.
    line_pitch : float
        Lateral distance between adjacent A-lines in m.
    """

    samples: np.ndarray
    fs: float = 40e6
    fc: float = 10e6
    c: float = 1540.0
    line_pitch: float = 3e-4

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 2:
            raise InvalidInputError(f"RF samples must be 2-D, got shape {samples.shape}")
        rows, cols = samples.shape
        if rows < MIN_ROWS or cols < MIN_COLS:
            raise InvalidInputError(
                f"frame {rows}x{cols} is below the minimum {MIN_ROWS}x{MIN_COLS}")
        if not np.all(np.isfinite(samples)):
            raise InvalidInputError("RF samples contain non-finite values")
        for name in ("fs", "fc", "c", "line_pitch"):
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"{name} must be positive")
        if not self.fs > 2 * self.fc:
            raise InvalidInputError(
                f"fs={self.fs:g} Hz violates Nyquist for fc={self.fc:g} Hz")
        object.__setattr__(self, "samples", samples)

    @property
    def shape(self):
        return self.samples.shape

    def metadata(self):
        return {"fs": self.fs, "fc": self.fc, "c": self.c, "line_pitch": self.line_pitch}

    def with_samples(self, samples):
        return RfFrame(samples, **self.metadata())


@dataclass(frozen=True)
class MultiChannelFrame:
    """Stacked ``(rf, envelope, hilbert_imag)`` channels, shape (3, rows, cols).

    ``spacing`` holds the (axial, lateral) sample spacing in metres and is
    doubled along each axis every time the frame is downsampled.
    """

    channels: np.ndarray
    spacing: tuple = (1.0, 1.0)

    def __post_init__(self):
        channels = np.asarray(self.channels, dtype=np.float64)
        if channels.ndim != 3:
            raise InvalidInputError("channels must have shape (n_channels, rows, cols)")
        object.__setattr__(self, "channels", channels)

    @property
    def shape(self):
        return self.channels.shape[1:]

    @property
    def rf(self):
        return self.channels[0]

    @property
    def envelope(self):
        return self.channels[1]

    @property
    def imag(self):
        return self.channels[2]


def analytic_signal(line, axis=-1):
    """Discrete analytic signal of a real sequence.

    Negative frequencies are zeroed and strictly positive ones doubled; the DC
    bin and, for even lengths, the Nyquist bin keep unit weight.  ``line`` may
    be an N-D array, in which case each 1-D slice along ``axis`` is treated
    independently.
    """
    x = np.asarray(line, dtype=np.float64)
    if x.ndim == 0:
        raise InvalidInputError("analytic_signal needs at least one dimension")
    n = x.shape[axis]
    if n < 2:
        raise InvalidInputError(f"sequence length must be >= 2, got {n}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("sequence contains non-finite values")

    h = np.zeros(n)
    h[0] = 1.0
    if n % 2 == 0:
        h[n // 2] = 1.0
        h[1:n // 2] = 2.0
    else:
        h[1:(n + 1) // 2] = 2.0
    shape = [1] * x.ndim
    shape[axis] = n
    spectrum = np.fft.fft(x, axis=axis)
    return np.fft.ifft(spectrum * h.reshape(shape), axis=axis)


def build_channels(frame):
    """Build the RF / envelope / imaginary-Hilbert input from an RF frame.

    The analytic signal is taken along the axial axis of every A-line.  All
    three channels are divided by the RMS of the raw RF so losses are
    comparable across acquisition gains; an all-zero frame is left unscaled.
    """
    rf = frame.samples
    z = analytic_signal(rf, axis=0)
    channels = np.stack([rf, np.abs(z), z.imag])
    rms = np.sqrt(np.mean(rf * rf))
    if rms > 0:
        channels = channels / rms
    return MultiChannelFrame(channels, spacing=(axial_spacing(frame), frame.line_pitch))


def axial_spacing(frame):
    """Distance between adjacent axial samples, ``c / (2 fs)`` in metres."""
    return frame.c / (2.0 * frame.fs)
