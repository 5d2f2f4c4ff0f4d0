import os
import csv
import json
import math
import struct
import logging
from pathlib import Path
from dataclasses import asdict

import numpy as np
import torch

from ivector_gan_pytorch.errors import DataError
from ivector_gan_pytorch.mlp import Mlp
from ivector_gan_pytorch.gan import GanConfig, GanModels, EpochRecord, TrainHistory
from ivector_gan_pytorch.plda import PldaModel
from ivector_gan_pytorch.synthcorpus import CorpusConfig, Corpus, TrialList
from ivector_gan_pytorch.evaluation import ScoredTrialSet
from ivector_gan_pytorch.vecspace import DTYPE
from ivector_gan_pytorch.version import __version__

logger = logging.getLogger(__name__)

# constants

MAGIC = b'IVGAN1\0\0'

FORMAT_VERSION = 1

KINDS = ('generator', 'speaker_head', 'critic', 'plda', 'corpus', 'vectors')

DTYPES = {
    'float32': np.dtype('<f4'),
    'float64': np.dtype('<f8')
}

HEADER_LENGTH = struct.Struct('<Q')

# helpers

def exists(val):
    return val is not None

def write_atomic(path, data):
    path = Path(path)
    path.parent.mkdir(parents = True, exist_ok = True)

    tmp = path.with_name(path.name + '.tmp')
    tmp.write_bytes(data)
    os.replace(tmp, path)

# container
# magic | header length (little-endian uint64) | utf-8 json header | little-endian row-major payload

def write_container(path, kind, tensors, *, dtype = 'float32', meta = None):
    assert kind in KINDS, f'unknown container kind {kind}'
    np_dtype = DTYPES[dtype]

    header = dict(
        format_version = FORMAT_VERSION,
        kind = kind,
        dtype = dtype,
        tensors = [dict(name = name, shape = list(t.shape)) for name, t in tensors],
        writer = f'ivector-gan-pytorch {__version__}',
        **(meta or dict())
    )

    header_bytes = json.dumps(header, sort_keys = True).encode('utf-8')
    payload = b''.join(np.ascontiguousarray(t.detach().cpu().numpy(), dtype = np_dtype).tobytes() for _, t in tensors)

    write_atomic(path, MAGIC + HEADER_LENGTH.pack(len(header_bytes)) + header_bytes + payload)

def read_container(path, kind = None):
    data = Path(path).read_bytes()

    if len(data) < len(MAGIC) or data[:len(MAGIC)] != MAGIC:
        raise DataError(f'{path} is not an ivector-gan container (bad magic)')

    offset = len(MAGIC)

    if len(data) < offset + HEADER_LENGTH.size:
        raise DataError(f'{path} is truncated before the header length')

    header_length, = HEADER_LENGTH.unpack_from(data, offset)
    offset += HEADER_LENGTH.size

    if len(data) < offset + header_length:
        raise DataError(f'{path} is truncated inside the header')

    try:
        header = json.loads(data[offset:offset + header_length].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise DataError(f'{path} has a malformed header: {err}') from err

    offset += header_length

    if header.get('format_version') != FORMAT_VERSION:
        raise DataError(f'{path} has format version {header.get("format_version")}, expected {FORMAT_VERSION}')

    if exists(kind) and header.get('kind') != kind:
        raise DataError(f'{path} holds a {header.get("kind")!r} container, expected {kind!r}')

    if header.get('dtype') not in DTYPES:
        raise DataError(f'{path} declares unknown dtype {header.get("dtype")!r}')

    np_dtype = DTYPES[header['dtype']]
    shapes = [(spec['name'], tuple(spec['shape'])) for spec in header['tensors']]

    expected = sum(math.prod(shape) for _, shape in shapes)
    payload = data[offset:]

    if len(payload) != expected * np_dtype.itemsize:
        raise DataError(f'{path} payload holds {len(payload) / np_dtype.itemsize:g} values, header declares {expected}')

    flat = np.frombuffer(payload, dtype = np_dtype)
    tensors, start = dict(), 0

    for name, shape in shapes:
        count = math.prod(shape)
        tensors[name] = torch.from_numpy(flat[start:start + count].astype(np.float64)).reshape(shape)
        start += count

    return header, tensors

# networks

def save_mlp(path, net, kind, *, meta = None):
    tensors = [(name, param) for name, param in net.named_parameters()]

    meta = dict(
        layer_sizes = list(net.layer_sizes),
        activations = list(net.activations),
        alpha = net.alpha,
        **(meta or dict())
    )

    write_container(path, kind, tensors, dtype = 'float32', meta = meta)

def load_mlp(path, kind = None):
    header, tensors = read_container(path, kind)

    if header['kind'] not in {'generator', 'speaker_head', 'critic'}:
        raise DataError(f'{path} does not hold a network')

    net = Mlp(header['layer_sizes'], header['activations'], alpha = header['alpha'])
    params = dict(net.named_parameters())

    if set(params) != set(tensors):
        raise DataError(f'{path} parameters {sorted(tensors)} do not match the declared layers {sorted(params)}')

    with torch.no_grad():
        for name, param in params.items():
            if param.shape != tensors[name].shape:
                raise DataError(f'{path} parameter {name} has shape {tuple(tensors[name].shape)}, expected {tuple(param.shape)}')

            param.copy_(tensors[name])

    return net, header

def gan_paths(directory):
    directory = Path(directory)
    return {kind: directory / f'{kind}.ivgan' for kind in ('generator', 'speaker_head', 'critic')}

def save_gan_models(directory, models, *, seed = None):
    meta = dict(dim = models.dim, gan_config = asdict(models.config), seed = seed)

    for kind, path in gan_paths(directory).items():
        net = getattr(models, kind)

        if exists(net):
            save_mlp(path, net, kind, meta = meta)

def load_gan_models(generator_path, speaker_head_path = None, critic_path = None):
    generator, header = load_mlp(generator_path, 'generator')
    config = GanConfig(**header['gan_config'])

    load_optional = lambda path, kind: load_mlp(path, kind)[0] if exists(path) else None

    return GanModels(
        generator,
        load_optional(speaker_head_path, 'speaker_head'),
        load_optional(critic_path, 'critic'),
        dim = header['dim'],
        config = config
    )

def load_gan_directory(directory):
    paths = gan_paths(directory)
    optional = lambda kind: paths[kind] if paths[kind].exists() else None
    return load_gan_models(paths['generator'], optional('speaker_head'), optional('critic'))

# plda

def save_plda(path, model, *, seed = None):
    tensors = [(name, getattr(model, name)) for name in ('mean', 'speaker_subspace', 'residual_cov')]
    write_container(path, 'plda', tensors, dtype = 'float32', meta = dict(dim = model.dim, q = model.q, seed = seed))

def load_plda(path):
    _, tensors = read_container(path, 'plda')
    return PldaModel(tensors['mean'], tensors['speaker_subspace'], tensors['residual_cov'])

# corpus and vectors

def save_corpus(path, corpus):
    tensors = [(name, getattr(corpus, name).to(DTYPE)) for name in ('long_vecs', 'long_speakers', 'short_vecs', 'short_parents')]
    write_container(path, 'corpus', tensors, dtype = 'float64', meta = dict(corpus_config = asdict(corpus.config), seed = corpus.config.seed))

def load_corpus(path):
    header, tensors = read_container(path, 'corpus')

    return Corpus(
        config = CorpusConfig(**header['corpus_config']),
        long_vecs = tensors['long_vecs'],
        long_speakers = tensors['long_speakers'].long(),
        short_vecs = tensors['short_vecs'],
        short_parents = tensors['short_parents'].long()
    )

def save_vectors(path, vectors, refs = None, *, meta = None):
    vectors = torch.as_tensor(vectors, dtype = DTYPE)

    if exists(refs) and len(refs) != len(vectors):
        raise DataError('need exactly one reference per vector')

    write_container(path, 'vectors', [('vectors', vectors)], dtype = 'float64', meta = dict(refs = refs, **(meta or dict())))

def load_vectors(path):
    header, tensors = read_container(path, 'vectors')
    return tensors['vectors'], header.get('refs')

# csv

SCORE_COLUMNS = ('trial_id', 'enroll_ref', 'test_ref', 'is_target', 'score')

DET_COLUMNS = ('threshold', 'p_fa', 'p_miss')

TRIAL_COLUMNS = ('trial_id', 'mode', 'enroll_ref', 'test_ref', 'is_target')

REPORT_COLUMNS = ('condition', 'system', 'description', 'status', 'eer', 'min_dcf', 'c_miss', 'c_fa', 'p_target')

COMPENSATION_COLUMNS = ('system', 'raw_mean', 'raw_nested', 'transformed_mean', 'transformed_nested')

def format_cell(value):
    if isinstance(value, bool):
        return str(int(value))

    if isinstance(value, float):
        return repr(value)

    return '' if value is None else str(value)

def write_csv(path, columns, rows):
    path = Path(path)
    path.parent.mkdir(parents = True, exist_ok = True)

    with path.open('w', newline = '') as f:
        writer = csv.writer(f, lineterminator = '\n')
        writer.writerow(columns)

        for row in rows:
            writer.writerow([format_cell(value) for value in row])

def read_csv(path, columns):
    with Path(path).open(newline = '') as f:
        rows = list(csv.reader(f))

    if len(rows) == 0 or tuple(rows[0]) != tuple(columns):
        raise DataError(f'{path} does not have the expected columns {", ".join(columns)}')

    body = rows[1:]

    if any(len(row) != len(columns) for row in body):
        raise DataError(f'{path} has rows with the wrong number of fields')

    return [dict(zip(columns, row)) for row in body]

def parse_float(text, path):
    try:
        return float(text)
    except ValueError as err:
        raise DataError(f'{path}: {text!r} is not a number') from err

def parse_flag(text, path):
    if text not in {'0', '1'}:
        raise DataError(f'{path}: is_target must be 0 or 1, got {text!r}')

    return text == '1'

def write_scores(path, scored):
    enroll = scored.enroll_refs or [''] * len(scored)
    test = scored.test_refs or [''] * len(scored)

    rows = zip(range(len(scored)), enroll, test, scored.is_target.tolist(), scored.scores.tolist())
    write_csv(path, SCORE_COLUMNS, rows)

def read_scores(path, condition = ''):
    rows = read_csv(path, SCORE_COLUMNS)

    if len(rows) == 0:
        raise DataError(f'{path} holds no scores')

    return ScoredTrialSet(
        torch.tensor([parse_float(row['score'], path) for row in rows], dtype = DTYPE),
        torch.tensor([parse_flag(row['is_target'], path) for row in rows]),
        condition = condition,
        enroll_refs = [row['enroll_ref'] for row in rows],
        test_refs = [row['test_ref'] for row in rows]
    )

def write_det(path, points):
    write_csv(path, DET_COLUMNS, points)

def read_det(path):
    return [tuple(parse_float(row[column], path) for column in DET_COLUMNS) for row in read_csv(path, DET_COLUMNS)]

def write_trials(path, trials):
    rows = ((ind, trials.mode, enroll, test, is_target) for ind, (enroll, test, is_target) in enumerate(trials.entries()))
    write_csv(path, TRIAL_COLUMNS, rows)

def read_trials(path):
    rows = read_csv(path, TRIAL_COLUMNS)
    modes = {row['mode'] for row in rows}

    if len(modes) != 1:
        raise DataError(f'{path} must hold trials of exactly one mode, found {sorted(modes)}')

    return TrialList(
        mode = modes.pop(),
        enroll_refs = [row['enroll_ref'] for row in rows],
        test_refs = [row['test_ref'] for row in rows],
        is_target = [parse_flag(row['is_target'], path) for row in rows]
    )

def write_history(path, history):
    write_csv(path, EpochRecord._fields, history)

def read_history(path):
    history = TrainHistory()

    for row in read_csv(path, EpochRecord._fields):
        epoch, *values = (row[column] for column in EpochRecord._fields)
        history.append(EpochRecord(int(epoch), *(parse_float(value, path) for value in values)))

    return history
