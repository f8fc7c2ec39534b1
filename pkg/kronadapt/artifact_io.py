'''
File formats: layer manifests, adapter checkpoints, embedding sets,
train configs and loss histories.

Every JSON document carries 'schema_version'. Checkpoints require it;
the hand-written files (manifest, train config, embeddings) may leave
it out, meaning the current version. docs/formats.md has the schemas.
'''
import collections
import dataclasses
import enum
import json
import logging
import numbers
import pathlib
import struct

import numpy as np

from kronadapt.adapters import get_adapter
from kronadapt.exceptions import (
    DuplicateLayer,
    InvalidSpec,
    KronAdaptError,
    NonPositiveDim,
    ParseError,
    SchemaVersionMismatch,
)
from kronadapt.metrics import EmbeddingSet
from kronadapt.training import TrainConfig

__all__ = [
    'SCHEMA_VERSION',
    'EMBEDDING_MAGIC',
    'LayerGroup',
    'Layer',
    'LayerManifest',
    'parse_manifest',
    'load_manifest',
    'save_manifest',
    'save_checkpoint',
    'load_checkpoint',
    'load_embeddings',
    'save_embeddings',
    'load_train_config',
    'save_history_csv',
]

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
EMBEDDING_MAGIC = b'EMB1'
# dim, count
_EMBEDDING_HEADER = struct.Struct('<II')


class LayerGroup(str, enum.Enum):
    Q = 'Q'
    K = 'K'
    V = 'V'
    O = 'O'  # NOQA: E741
    OTHER = 'other'


@dataclasses.dataclass(frozen=True)
class Layer:
    '''
    d
        out dimension
    h
        in dimension
    '''
    layer_name: str
    d: int
    h: int
    group: LayerGroup = LayerGroup.OTHER


@dataclasses.dataclass(frozen=True)
class LayerManifest:
    name: str
    layers: tuple

    def to_dict(self):
        return {
            'schema_version': SCHEMA_VERSION,
            'name': self.name,
            'layers': [
                {'layer_name': layer.layer_name, 'd': layer.d, 'h': layer.h, 'group': layer.group.value}
                for layer in self.layers
            ],
        }


def _read_json(path):
    try:
        with open(path, encoding='utf-8') as f:
            return json.load(f)
    except (ValueError, UnicodeDecodeError) as e:
        raise ParseError('File is not valid JSON.', params={'path': str(path), 'reason': str(e)})


def _write_json(value, path):
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(value, f, indent=2)
        f.write('\n')


def _check_version(value, path, required=False):
    if not isinstance(value, dict):
        raise ParseError('Expected a JSON object.', params={'path': str(path)})
    if 'schema_version' not in value and not required:
        return
    version = value.get('schema_version')
    # true and 1.0 both compare equal to 1
    if type(version) is not int or version != SCHEMA_VERSION:
        raise SchemaVersionMismatch(
            'Unsupported schema version.',
            params={'path': str(path), 'schema_version': version, 'supported': SCHEMA_VERSION}
        )


# =========================================
# Layer manifests
# =========================================

def _parse_layer(i, entry):
    if not isinstance(entry, dict):
        raise ParseError('Layer entry must be an object.', params={'field': 'layers[{}]'.format(i)})
    for key in ('layer_name', 'd', 'h'):
        if key not in entry:
            raise ParseError('Missing layer field.', params={'field': 'layers[{}].{}'.format(i, key)})
    name = entry['layer_name']
    if not isinstance(name, str) or not name:
        raise ParseError('layer_name must be a non-empty string.', params={'field': 'layers[{}].layer_name'.format(i)})
    for key in ('d', 'h'):
        value = entry[key]
        if isinstance(value, bool) or not isinstance(value, numbers.Integral):
            raise ParseError('Dimension must be an integer.', params={'field': key, 'layer': name})
        if value < 1:
            raise NonPositiveDim('Dimension must be at least 1.', params={'field': key, 'layer': name, key: value})
    try:
        group = LayerGroup(entry.get('group', LayerGroup.OTHER.value))
    except ValueError:
        raise ParseError('Unknown layer group.', params={'field': 'group', 'layer': name, 'group': entry.get('group')})
    return Layer(layer_name=name, d=int(entry['d']), h=int(entry['h']), group=group)


def parse_manifest(value, path='<manifest>'):
    _check_version(value, path)
    name = value.get('name')
    layers = value.get('layers')
    if not isinstance(name, str):
        raise ParseError('Manifest needs a string name.', params={'field': 'name'})
    if not isinstance(layers, list):
        raise ParseError('Manifest needs a list of layers.', params={'field': 'layers'})
    parsed = []
    seen = set()
    for i, entry in enumerate(layers):
        layer = _parse_layer(i, entry)
        if layer.layer_name in seen:
            raise DuplicateLayer('Layer names must be unique.', params={'layer': layer.layer_name})
        seen.add(layer.layer_name)
        parsed.append(layer)
    return LayerManifest(name=name, layers=tuple(parsed))


def load_manifest(path):
    manifest = parse_manifest(_read_json(path), path)
    logger.debug('Loaded manifest %r with %d layers from %s', manifest.name, len(manifest.layers), path)
    return manifest


def save_manifest(manifest, path):
    _write_json(manifest.to_dict(), path)


# =========================================
# Adapter checkpoints
# =========================================

def save_checkpoint(states, path):
    '''
    Write layer name -> adapter state. Factors are stored exactly, so
    load_checkpoint() returns equal arrays bit for bit.
    '''
    value = {
        'schema_version': SCHEMA_VERSION,
        'adapters': collections.OrderedDict(
            (name, get_adapter(state.family).get_prep_value(state))
            for name, state in states.items()
        ),
    }
    _write_json(value, path)
    logger.debug('Saved %d adapters to %s', len(states), path)


def load_checkpoint(path):
    value = _read_json(path)
    _check_version(value, path, required=True)
    adapters = value.get('adapters')
    if not isinstance(adapters, dict):
        raise ParseError('Checkpoint needs an adapters object.', params={'field': 'adapters'})
    states = collections.OrderedDict()
    for name, entry in adapters.items():
        try:
            if not isinstance(entry, dict):
                raise ParseError('Adapter entry must be an object.')
            states[name] = get_adapter(entry.get('family')).to_python(entry)
        except (KronAdaptError, ValueError) as e:
            params = dict(getattr(e, 'params', {}), layer=name)
            raise ParseError(getattr(e, 'message', str(e)), params=params) from e
    logger.debug('Loaded %d adapters from %s', len(states), path)
    return states


# =========================================
# Embedding sets
# =========================================

def _load_binary_embeddings(raw, path, role):
    header_end = len(EMBEDDING_MAGIC) + _EMBEDDING_HEADER.size
    if len(raw) < header_end:
        raise ParseError('Truncated embedding header.', params={'path': str(path)})
    dim, count = _EMBEDDING_HEADER.unpack_from(raw, len(EMBEDDING_MAGIC))
    payload = raw[header_end:]
    if len(payload) != 8 * dim * count:
        raise ParseError(
            'Embedding payload length does not match its header.',
            params={'path': str(path), 'dim': dim, 'count': count, 'bytes': len(payload)}
        )
    vectors = np.frombuffer(payload, dtype='<f8').astype(np.float64).reshape(count, dim)
    return EmbeddingSet(label=pathlib.Path(path).stem, vectors=vectors, role=role)


def load_embeddings(path, role=None):
    '''
    Read a JSON or EMB1 binary embedding file; the format is told from
    the first bytes.

    role
        when given, replaces the role stored in the file. Binary files
        store none and need it.
    '''
    with open(path, 'rb') as f:
        raw = f.read()
    if raw.startswith(EMBEDDING_MAGIC):
        if role is None:
            raise ParseError('Binary embedding files need a role.', params={'path': str(path)})
        eset = _load_binary_embeddings(raw, path, role)
    else:
        try:
            value = json.loads(raw.decode('utf-8'))
        except (ValueError, UnicodeDecodeError) as e:
            raise ParseError('File is not valid JSON.', params={'path': str(path), 'reason': str(e)})
        _check_version(value, path)
        for key in ('label', 'vectors'):
            if key not in value:
                raise ParseError('Missing embedding field.', params={'field': key, 'path': str(path)})
        role = value.get('role') if role is None else role
        if role is None:
            raise ParseError('Missing embedding field.', params={'field': 'role', 'path': str(path)})
        if not isinstance(value['vectors'], list):
            raise ParseError('vectors must be a list.', params={'field': 'vectors', 'path': str(path)})
        try:
            eset = EmbeddingSet.from_vectors(value['label'], value['vectors'], role)
        except (TypeError, ValueError) as e:
            raise ParseError('Malformed vectors.', params={'field': 'vectors', 'reason': str(e)})
        if 'dim' in value and value['dim'] != eset.dim:
            raise ParseError(
                'Declared dim disagrees with the vectors.',
                params={'field': 'dim', 'dim': value['dim'], 'vectors': eset.dim}
            )
    logger.debug('Loaded %d embeddings of dim %d from %s', len(eset), eset.dim, path)
    return eset


def save_embeddings(eset, path, binary=False):
    if binary:
        with open(path, 'wb') as f:
            f.write(EMBEDDING_MAGIC)
            f.write(_EMBEDDING_HEADER.pack(eset.dim, len(eset)))
            f.write(np.ascontiguousarray(eset.vectors, dtype='<f8').tobytes())
        return
    _write_json({
        'schema_version': SCHEMA_VERSION,
        'label': eset.label,
        'role': eset.role.value,
        'dim': eset.dim,
        'vectors': eset.vectors.tolist(),
    }, path)


# =========================================
# Training runs
# =========================================

def load_train_config(path):
    value = _read_json(path)
    _check_version(value, path)
    value = {k: v for k, v in value.items() if k != 'schema_version'}
    try:
        config = TrainConfig.from_dict(value)
    except InvalidSpec as e:
        raise ParseError(e.message, params=dict(e.params, path=str(path))) from e
    except TypeError as e:
        raise ParseError('Malformed train config.', params={'path': str(path), 'reason': str(e)})
    logger.debug('Loaded train config from %s: %r', path, config)
    return config


def save_history_csv(history, path):
    with open(path, 'w', encoding='utf-8', newline='') as f:
        f.write(history.to_csv())
