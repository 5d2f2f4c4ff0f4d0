import torch
from einops import reduce

from ivector_gan_pytorch.errors import DataError

# constants

DTYPE = torch.float64

# helpers

def exists(val):
    return val is not None

def default(val, d):
    if exists(val):
        return val
    return d() if callable(d) else d

def check_finite(t, what = 'i-vector'):
    if not torch.isfinite(t).all():
        raise DataError(f'{what} has non-finite components')
    return t

# ivectors are 1-d float64 tensors with finite components, batches of them are (batch, dim)

def as_ivector(values):
    v = torch.as_tensor(values, dtype = DTYPE)

    if v.ndim != 1 or v.numel() == 0:
        raise DataError(f'an i-vector must be a non-empty 1-d sequence, got shape {tuple(v.shape)}')

    return check_finite(v)

def as_batch(values, dim = None):
    t = torch.as_tensor(values, dtype = DTYPE)

    if t.ndim == 1:
        t = t.unsqueeze(0)

    if t.ndim != 2:
        raise DataError(f'expected a (batch, dim) matrix, got shape {tuple(t.shape)}')

    if exists(dim) and t.shape[-1] != dim:
        raise DataError(f'expected width {dim}, got {t.shape[-1]}')

    return check_finite(t, 'i-vector batch')

def as_vectors(values):
    """ a single i-vector or a batch, kept in its shape """

    t = torch.as_tensor(values, dtype = DTYPE)
    return as_ivector(t) if t.ndim == 1 else as_batch(t)

def row_norms(t):
    return reduce(t ** 2, '... d -> ...', 'sum').sqrt()

# length normalization

def length_normalize(v):
    """ scale to unit l2 norm, works on a single i-vector or row-wise on a batch """

    v = as_vectors(v)
    norms = row_norms(v)

    if (norms == 0).any():
        raise DataError('cannot normalize zero vector')

    return v / norms.unsqueeze(-1)

# cosine distance

def cosine_distance(a, b):
    """ 1 - cos(a, b), in [0, 2]. row-wise when given batches """

    a, b = map(as_vectors, (a, b))

    if a.shape[-1] != b.shape[-1]:
        raise DataError(f'dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}')

    norm_a, norm_b = row_norms(a), row_norms(b)

    if (norm_a == 0).any() or (norm_b == 0).any():
        raise DataError('cosine distance of a zero-norm vector is undefined')

    cos = reduce(a * b, '... d -> ...', 'sum') / (norm_a * norm_b)
    return (1. - cos).clamp(0., 2.)
