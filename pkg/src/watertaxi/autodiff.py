"""Forward-mode automatic differentiation via dual numbers.

``Dual`` carries a value array and a matrix of directional derivatives; all
arithmetic propagates both, so derivatives of smooth compositions are exact
to machine precision. The model functions in :mod:`watertaxi.model` accept
Dual arguments, which lets :func:`gradient` and :func:`jacobian` be applied
to arbitrary callbacks built from them.

Modulus kinks: ``smooth_abs`` replaces |s| by sqrt(s^2 + eps^2). Whenever a
differentiated modulus argument lands within eps of zero, a module counter
is bumped; this is informational only (query with :func:`kink_count`).
"""

from __future__ import annotations

import numpy as np

_NEAR_KINK = 0


def reset_kink_counter() -> None:
    global _NEAR_KINK
    _NEAR_KINK = 0


def kink_count() -> int:
    return _NEAR_KINK


def _note_kink(vals, eps) -> None:
    global _NEAR_KINK
    _NEAR_KINK += int(np.count_nonzero(np.abs(vals) <= eps))


class Dual:
    """Value plus directional derivatives along m seed directions.

    val has shape S (scalar or vector); der has shape S + (m,).
    """

    __slots__ = ("val", "der")
    __array_ufunc__ = None  # force numpy to defer to our operators

    def __init__(self, val, der):
        self.val = np.asarray(val, dtype=float)
        self.der = np.asarray(der, dtype=float)

    @property
    def m(self) -> int:
        return self.der.shape[-1]

    # -- construction -----------------------------------------------------
    @classmethod
    def seed(cls, val) -> "Dual":
        """Vector Dual with identity seeds (one direction per entry)."""
        v = np.atleast_1d(np.asarray(val, dtype=float))
        return cls(v, np.eye(v.shape[0]))

    @classmethod
    def constant(cls, val, m: int) -> "Dual":
        v = np.asarray(val, dtype=float)
        return cls(v, np.zeros(v.shape + (m,)))

    # -- arithmetic --------------------------------------------------------
    def _coerce(self, other) -> "Dual":
        if isinstance(other, Dual):
            return other
        return Dual.constant(other, self.m)

    def __add__(self, other):
        o = self._coerce(other)
        return Dual(self.val + o.val, self.der + o.der)

    __radd__ = __add__

    def __sub__(self, other):
        o = self._coerce(other)
        return Dual(self.val - o.val, self.der - o.der)

    def __rsub__(self, other):
        o = self._coerce(other)
        return Dual(o.val - self.val, o.der - self.der)

    def __mul__(self, other):
        o = self._coerce(other)
        return Dual(self.val * o.val, self.val[..., None] * o.der + o.val[..., None] * self.der)

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = self._coerce(other)
        v = self.val / o.val
        return Dual(v, (self.der - v[..., None] * o.der) / o.val[..., None])

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __pow__(self, p):
        if not np.isscalar(p):
            raise TypeError("Dual powers support scalar exponents only")
        if p == 0:
            return Dual(np.ones_like(self.val), np.zeros_like(self.der))
        v = self.val ** p
        return Dual(v, (p * self.val ** (p - 1))[..., None] * self.der)

    def __neg__(self):
        return Dual(-self.val, -self.der)

    def __abs__(self):
        _note_kink(self.val, 0.0)
        s = np.sign(self.val)
        return Dual(np.abs(self.val), s[..., None] * self.der)

    # -- structure ---------------------------------------------------------
    def __getitem__(self, idx):
        return Dual(self.val[idx], self.der[idx])

    def __len__(self):
        return len(self.val)

    def sum(self):
        return Dual(self.val.sum(), self.der.reshape(-1, self.m).sum(axis=0))

    def __repr__(self):
        return f"Dual(val={self.val!r})"

    # comparisons act on values (used by branching code)
    def __lt__(self, other):
        return self.val < (other.val if isinstance(other, Dual) else other)

    def __gt__(self, other):
        return self.val > (other.val if isinstance(other, Dual) else other)

    def __le__(self, other):
        return self.val <= (other.val if isinstance(other, Dual) else other)

    def __ge__(self, other):
        return self.val >= (other.val if isinstance(other, Dual) else other)


def stack(items) -> Dual:
    """Stack scalar Duals (or floats) into a vector Dual."""
    duals = [d for d in items if isinstance(d, Dual)]
    if not duals:
        return np.asarray(items, dtype=float)
    m = duals[0].m
    vals = np.array([(it.val if isinstance(it, Dual) else it) for it in items], dtype=float)
    ders = np.array(
        [(it.der if isinstance(it, Dual) else np.zeros(m)) for it in items], dtype=float
    )
    return Dual(vals, ders)


# -- elementary functions ---------------------------------------------------

def sin(x):
    if isinstance(x, Dual):
        return Dual(np.sin(x.val), np.cos(x.val)[..., None] * x.der)
    return np.sin(x)


def cos(x):
    if isinstance(x, Dual):
        return Dual(np.cos(x.val), -np.sin(x.val)[..., None] * x.der)
    return np.cos(x)


def exp(x):
    if isinstance(x, Dual):
        v = np.exp(x.val)
        return Dual(v, v[..., None] * x.der)
    return np.exp(x)


def sqrt(x):
    if isinstance(x, Dual):
        v = np.sqrt(x.val)
        return Dual(v, x.der / (2.0 * v[..., None]))
    return np.sqrt(x)


def smooth_abs(x, eps: float = 0.0):
    """sqrt(x^2 + eps^2); exact |x| for eps = 0 (derivative 0 at the kink)."""
    if isinstance(x, Dual):
        _note_kink(x.val, eps)
        v = np.sqrt(x.val * x.val + eps * eps)
        slope = np.divide(x.val, v, out=np.zeros_like(v), where=v > 0.0)
        return Dual(v, slope[..., None] * x.der)
    return np.sqrt(np.asarray(x) ** 2 + eps * eps)


def value(x):
    """Value part of a Dual, pass-through otherwise."""
    return x.val if isinstance(x, Dual) else x


# -- driver API --------------------------------------------------------------

def gradient(f, z) -> np.ndarray:
    """Gradient of a scalar callback at z via dual-number propagation."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    out = f(Dual.seed(z))
    if isinstance(out, Dual):
        return np.asarray(out.der, dtype=float).reshape(z.shape[0])
    return np.zeros(z.shape[0])


def jacobian(g, z) -> np.ndarray:
    """Jacobian of a vector callback at z via dual-number propagation."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    out = g(Dual.seed(z))
    if isinstance(out, Dual):
        return np.asarray(out.der, dtype=float).reshape(-1, z.shape[0])
    out = np.atleast_1d(np.asarray(out, dtype=float))
    return np.zeros((out.shape[0], z.shape[0]))


def fd_gradient(f, z, rel_step: float = 1e-6) -> np.ndarray:
    """Central finite differences, step 1e-6 (1 + |z_i|)."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    g = np.zeros(z.shape[0])
    for i in range(z.shape[0]):
        h = rel_step * (1.0 + abs(z[i]))
        zp = z.copy()
        zp[i] += h
        zm = z.copy()
        zm[i] -= h
        g[i] = (f(zp) - f(zm)) / (2.0 * h)
    return g


def fd_jacobian(g, z, rel_step: float = 1e-6) -> np.ndarray:
    z = np.atleast_1d(np.asarray(z, dtype=float))
    cols = []
    for i in range(z.shape[0]):
        h = rel_step * (1.0 + abs(z[i]))
        zp = z.copy()
        zp[i] += h
        zm = z.copy()
        zm[i] -= h
        cols.append((np.asarray(g(zp), dtype=float) - np.asarray(g(zm), dtype=float)) / (2.0 * h))
    return np.stack(cols, axis=-1)
