"""Forward maps ``a -> m``, priors over the parameter, and measurement noise."""

from dataclasses import dataclass, field

import numpy as np

from .rng import substream

__all__ = [
    "LinearForwardMap",
    "EllipticModel",
    "PriorSpec",
    "NoiseSpec",
    "make_linear_map",
    "apply_forward",
    "thomas_solve",
    "solve_elliptic",
    "sample_prior",
    "add_noise",
]

A_MIN = 1e-3

LINEAR_KINDS = ("gaussian_sensing", "convolution_toeplitz", "diagonal", "identity", "custom")


@dataclass(frozen=True)
class LinearForwardMap:
    """``m = A a`` with a dense ``A`` of shape ``(d_m, d_a)``."""

    a: np.ndarray = field(repr=False)
    kind: str = "custom"
    seed: int = 0

    def __post_init__(self):
        a = np.array(self.a, dtype=float)
        if a.ndim != 2 or min(a.shape) < 1:
            raise ValueError(f"forward matrix must be 2-D and nonempty, got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("forward matrix has non-finite entries")
        a.setflags(write=False)
        object.__setattr__(self, "a", a)

    @property
    def d_m(self):
        return self.a.shape[0]

    @property
    def d_a(self):
        return self.a.shape[1]

    def __call__(self, x):
        return apply_forward(self, x)

    @property
    def invertible(self):
        if self.d_m != self.d_a:
            return False
        return np.linalg.matrix_rank(self.a) == self.d_a

    def inverse(self, m):
        """Exact inverse for square nonsingular maps (used for explicit data)."""
        if not self.invertible:
            raise ValueError(f"{self.kind} forward map of shape {self.a.shape} is not invertible")
        m = np.asarray(m, dtype=float)
        if self.kind in ("diagonal", "identity"):
            return m / np.diag(self.a)
        return np.linalg.solve(self.a, m)


def make_linear_map(kind, d_m, d_a, params=None, seed=0) -> LinearForwardMap:
    """Build a linear forward map.

    ``params`` by kind: ``diagonal`` takes ``diag``; ``convolution_toeplitz``
    takes ``kernel`` (a "valid" convolution, so ``d_m = d_a - len(kernel) + 1``
    unless ``mode="same"``); ``custom`` takes ``matrix``.
    """
    params = dict(params or {})
    if d_m < 1 or d_a < 1:
        raise ValueError("dimensions must be >= 1")
    if kind == "gaussian_sensing":
        rng = substream(seed, "forward", "gaussian_sensing")
        a = rng.standard_normal((d_m, d_a)) / np.sqrt(d_m)
    elif kind == "identity":
        if d_m != d_a:
            raise ValueError("identity map needs d_m == d_a")
        a = np.eye(d_a)
    elif kind == "diagonal":
        diag = np.asarray(params.get("diag", np.ones(min(d_m, d_a))), dtype=float)
        if diag.shape != (min(d_m, d_a),):
            raise ValueError(f"diag must have length {min(d_m, d_a)}")
        a = np.zeros((d_m, d_a))
        a[np.arange(diag.size), np.arange(diag.size)] = diag
    elif kind == "convolution_toeplitz":
        kernel = np.asarray(params.get("kernel", ()), dtype=float)
        if kernel.size == 0:
            raise ValueError("convolution_toeplitz needs a nonempty kernel")
        if kernel.size > d_a:
            raise ValueError(f"kernel length {kernel.size} exceeds signal length {d_a}")
        mode = params.get("mode", "valid")
        if mode == "valid":
            if d_m != d_a - kernel.size + 1:
                raise ValueError(f"valid convolution needs d_m = {d_a - kernel.size + 1}")
            shift = kernel.size - 1
        elif mode == "same":
            if d_m != d_a:
                raise ValueError("same-mode convolution needs d_m == d_a")
            shift = (kernel.size - 1) // 2
        else:
            raise ValueError(f"unknown convolution mode {mode!r}")
        # row i is entry i + shift of the full convolution kernel * x
        a = np.zeros((d_m, d_a))
        for i in range(d_m):
            for k, w in enumerate(kernel):
                j = i + shift - k
                if 0 <= j < d_a:
                    a[i, j] = w
    elif kind == "custom":
        a = np.asarray(params["matrix"], dtype=float)
        if a.shape != (d_m, d_a):
            raise ValueError(f"custom matrix has shape {a.shape}, expected {(d_m, d_a)}")
    else:
        raise ValueError(f"unknown linear map kind {kind!r}")
    return LinearForwardMap(a=a, kind=kind, seed=int(seed))


def apply_forward(fmap: LinearForwardMap, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != fmap.d_a:
        raise ValueError(f"parameter has length {x.shape[-1]}, map expects {fmap.d_a}")
    return x @ fmap.a.T


# -- 1-D elliptic model ------------------------------------------------------


def thomas_solve(lower, diag, upper, rhs):
    """Solve a tridiagonal system; ``lower[i]`` couples row ``i+1`` to ``i``."""
    n = len(diag)
    c = np.empty(max(n - 1, 0))
    d = np.empty(n)
    piv = diag[0]
    if piv == 0.0:
        raise np.linalg.LinAlgError("singular tridiagonal system (zero pivot at row 0)")
    if n > 1:
        c[0] = upper[0] / piv
    d[0] = rhs[0] / piv
    for i in range(1, n):
        piv = diag[i] - lower[i - 1] * c[i - 1]
        if piv == 0.0:
            raise np.linalg.LinAlgError(f"singular tridiagonal system (zero pivot at row {i})")
        if i < n - 1:
            c[i] = upper[i] / piv
        d[i] = (rhs[i] - lower[i - 1] * d[i - 1]) / piv
    x = np.empty(n)
    x[-1] = d[-1]
    for i in range(n - 2, -1, -1):
        x[i] = d[i] - c[i] * x[i + 1]
    return x


@dataclass(frozen=True)
class EllipticModel:
    """``-(a u')' = g`` on (0, 1) with ``u(0) = u(1) = 0``.

    ``a`` is piecewise constant on ``n_cells`` equal cells; ``source`` holds
    ``g`` at the ``grid_size`` interior nodes ``x_i = i h``, ``h = 1/(N+1)``.
    Measurements are ``u`` at ``sensor_indices`` (0-based interior indices).
    """

    grid_size: int
    source: np.ndarray = field(repr=False)
    sensor_indices: tuple
    n_cells: int
    a_min: float = A_MIN

    def __post_init__(self):
        src = np.array(self.source, dtype=float)
        if src.shape != (self.grid_size,):
            raise ValueError(f"source must have length {self.grid_size}")
        src.setflags(write=False)
        object.__setattr__(self, "source", src)
        object.__setattr__(self, "sensor_indices", tuple(int(i) for i in self.sensor_indices))
        if self.a_min <= 0:
            raise ValueError("a_min must be positive")
        if self.grid_size < self.n_cells or self.n_cells < 1:
            raise ValueError("need 1 <= n_cells <= grid_size")
        if not self.sensor_indices or any(i < 0 or i >= self.grid_size for i in self.sensor_indices):
            raise ValueError("sensor indices must lie on the interior grid")

    @classmethod
    def with_source(cls, grid_size, g, sensors, n_cells, a_min=A_MIN):
        """Sample a callable source ``g`` on the grid; ``sensors`` are x-positions in (0, 1)."""
        x = cls.nodes(grid_size)
        idx = [int(round(s * (grid_size + 1))) - 1 for s in sensors]
        return cls(grid_size, g(x), tuple(idx), n_cells, a_min)

    @staticmethod
    def nodes(grid_size):
        return np.arange(1, grid_size + 1) / (grid_size + 1)

    @property
    def d_a(self):
        return self.n_cells

    @property
    def d_m(self):
        return len(self.sensor_indices)

    @property
    def sensor_positions(self):
        return self.nodes(self.grid_size)[list(self.sensor_indices)]

    def __call__(self, a):
        return solve_elliptic(self, a)


def _node_coefficients(model, a):
    n = model.grid_size
    x = np.arange(0, n + 2) / (n + 1)
    cell = np.minimum((x * model.n_cells).astype(int), model.n_cells - 1)
    return a[cell]


def solve_elliptic(model: EllipticModel, a, full=False):
    """Conservative finite differences with harmonic-mean interface coefficients."""
    a = np.asarray(a, dtype=float)
    if a.shape != (model.n_cells,):
        raise ValueError(f"coefficient vector must have length {model.n_cells}")
    if np.any(~np.isfinite(a)) or np.any(a < model.a_min):
        raise ValueError(f"coefficients must be finite and >= a_min={model.a_min}")
    n = model.grid_size
    h = 1.0 / (n + 1)
    k = _node_coefficients(model, a)
    kf = 2.0 * k[:-1] * k[1:] / (k[:-1] + k[1:])  # interface i+1/2, i = 0..n
    diag = (kf[:-1] + kf[1:]) / h**2
    off = -kf[1:-1] / h**2
    u = thomas_solve(off, diag, off, model.source)
    if full:
        return u
    return u[list(model.sensor_indices)]


# -- priors and noise --------------------------------------------------------

PRIOR_KINDS = ("sparse_spike", "uniform_box", "truncated_gaussian")


@dataclass(frozen=True)
class PriorSpec:
    """Prior over the parameter.  Every kind has compact support.

    ``uniform_box``: uniform on ``center + [-radius, radius]^d``.
    ``truncated_gaussian``: ``N(center, scale^2 I)`` restricted to the same box.
    ``sparse_spike``: ``k`` distinct coordinates chosen uniformly, amplitudes
    uniform on ``[amp_min, amp_max]`` with a random sign unless
    ``signed=False``; support is the box of radius ``amp_max``.
    """

    kind: str
    dimension: int
    radius: float = 1.0
    center: float = 0.0
    scale: float = 1.0
    k: int = 1
    amp_min: float = 0.5
    amp_max: float = 1.0
    signed: bool = True

    def __post_init__(self):
        if self.kind not in PRIOR_KINDS:
            raise ValueError(f"unknown prior kind {self.kind!r}")
        if self.dimension < 1:
            raise ValueError("prior dimension must be >= 1")
        if self.kind == "sparse_spike":
            if not 1 <= self.k <= self.dimension:
                raise ValueError(f"sparsity k={self.k} must be in [1, d_a={self.dimension}]")
            if not 0 <= self.amp_min <= self.amp_max:
                raise ValueError("need 0 <= amp_min <= amp_max")
        elif self.radius <= 0:
            raise ValueError("box radius must be positive")
        if self.kind == "truncated_gaussian" and self.scale <= 0:
            raise ValueError("scale must be positive")

    @property
    def box_radius(self):
        return self.amp_max if self.kind == "sparse_spike" else self.radius

    @property
    def lower(self):
        c = 0.0 if self.kind == "sparse_spike" else self.center
        return np.full(self.dimension, c - self.box_radius)

    @property
    def upper(self):
        c = 0.0 if self.kind == "sparse_spike" else self.center
        return np.full(self.dimension, c + self.box_radius)

    @property
    def support_radius(self):
        """``sup ||a||_2`` over the support."""
        if self.kind == "sparse_spike":
            return self.amp_max * np.sqrt(self.k)
        return float(np.linalg.norm(np.maximum(np.abs(self.lower), np.abs(self.upper))))

    @property
    def has_density(self):
        return self.kind != "sparse_spike"

    def in_support(self, a):
        a = np.asarray(a, dtype=float)
        return bool(np.all(a >= self.lower) and np.all(a <= self.upper))

    def log_density(self, a):
        """Unnormalized log density; ``-inf`` outside the support."""
        if not self.has_density:
            raise ValueError("sparse_spike prior has no Lebesgue density")
        a = np.asarray(a, dtype=float)
        if not self.in_support(a):
            return -np.inf
        if self.kind == "uniform_box":
            return 0.0
        z = (a - self.center) / self.scale
        return -0.5 * float(z @ z)

    def density_on_grid(self, points):
        """Unnormalized density at an ``(n, d)`` array of in-box points."""
        points = np.asarray(points, dtype=float)
        if self.kind == "uniform_box":
            return np.ones(points.shape[0])
        if self.kind == "truncated_gaussian":
            z = (points - self.center) / self.scale
            return np.exp(-0.5 * np.sum(z * z, axis=1))
        raise ValueError("sparse_spike prior has no Lebesgue density")

    def draw(self, rng):
        d = self.dimension
        if self.kind == "uniform_box":
            return self.center + rng.uniform(-self.radius, self.radius, size=d)
        if self.kind == "truncated_gaussian":
            # rejection from the untruncated Gaussian, falling back to the box
            for _ in range(10_000):
                a = self.center + self.scale * rng.standard_normal(d)
                if np.all(np.abs(a - self.center) <= self.radius):
                    return a
            raise RuntimeError("truncated_gaussian rejection sampler stalled")
        a = np.zeros(d)
        idx = rng.choice(d, size=self.k, replace=False)
        amp = rng.uniform(self.amp_min, self.amp_max, size=self.k)
        if self.signed:
            amp = amp * rng.choice(np.array([-1.0, 1.0]), size=self.k)
        a[idx] = amp
        return a

    @property
    def mean(self):
        if self.kind in ("uniform_box", "truncated_gaussian"):
            return np.full(self.dimension, float(self.center))
        if self.signed:
            return np.zeros(self.dimension)
        return np.full(self.dimension, self.k / self.dimension * 0.5 * (self.amp_min + self.amp_max))


def sample_prior(spec: PriorSpec, n, seed, start=0):
    """``n`` i.i.d. draws; draw ``i`` uses stream ``(seed, "prior", start + i)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return np.array([spec.draw(substream(seed, "prior", start + i)) for i in range(n)])


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "none"
    std: float = 0.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "none"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if not np.isfinite(self.std) or self.std < 0:
            raise ValueError("noise std must be finite and >= 0")


def add_noise(m, spec: NoiseSpec, seed, stream=0):
    m = np.asarray(m, dtype=float)
    if not np.all(np.isfinite(m)):
        raise ValueError("measurement has non-finite entries")
    if spec.kind == "none" or spec.std == 0.0:
        return m.copy()
    rng = substream(seed, "noise", stream)
    return m + spec.std * rng.standard_normal(m.shape)
