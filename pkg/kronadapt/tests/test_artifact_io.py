import json
import os
import shutil
import tempfile
import unittest

import numpy as np
from numpy.testing import assert_array_equal

from kronadapt import artifact_io, training
from kronadapt.adapters import AdapterSpec, InitScheme, build_adapter
from kronadapt.exceptions import (
    DuplicateLayer,
    EmptySet,
    NonPositiveDim,
    ParseError,
    SchemaVersionMismatch,
)
from kronadapt.metrics import EmbeddingSet, Role


class TempDirMixin:

    def setUp(self):
        self.tmp = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def path(self, name):
        return os.path.join(self.tmp, name)

    def write_json(self, name, value):
        path = self.path(name)
        with open(path, 'w') as f:
            json.dump(value, f)
        return path


# python -m unittest kronadapt.tests.test_artifact_io
class TestManifest(TempDirMixin, unittest.TestCase):

    def manifest(self, layers):
        return {'name': 'unet', 'layers': layers}

    def test_load(self):
        path = self.write_json('m.json', self.manifest([
            {'layer_name': 'attn1.to_q', 'd': 320, 'h': 320, 'group': 'Q'},
            {'layer_name': 'ff.proj', 'd': 1280, 'h': 320},
        ]))
        manifest = artifact_io.load_manifest(path)
        self.assertEqual(manifest.name, 'unet')
        self.assertEqual([layer.layer_name for layer in manifest.layers], ['attn1.to_q', 'ff.proj'])
        self.assertIs(manifest.layers[0].group, artifact_io.LayerGroup.Q)
        self.assertIs(manifest.layers[1].group, artifact_io.LayerGroup.OTHER)
        self.assertEqual((manifest.layers[1].d, manifest.layers[1].h), (1280, 320))

    def test_duplicate(self):
        path = self.write_json('m.json', self.manifest([
            {'layer_name': 'a', 'd': 4, 'h': 4},
            {'layer_name': 'a', 'd': 8, 'h': 8},
        ]))
        with self.assertRaises(DuplicateLayer) as cm:
            artifact_io.load_manifest(path)
        self.assertEqual(cm.exception.params['layer'], 'a')

    def test_zero_dim(self):
        path = self.write_json('m.json', self.manifest([{'layer_name': 'a', 'd': 0, 'h': 4}]))
        with self.assertRaises(NonPositiveDim) as cm:
            artifact_io.load_manifest(path)
        self.assertEqual(cm.exception.params['field'], 'd')
        self.assertEqual(cm.exception.params['layer'], 'a')

    def test_bad_fields(self):
        for layers in (
            [{'layer_name': 'a', 'd': 4}],
            [{'layer_name': 'a', 'd': 4.5, 'h': 4}],
            [{'layer_name': 'a', 'd': True, 'h': 4}],
            [{'layer_name': '', 'd': 4, 'h': 4}],
            [{'layer_name': 'a', 'd': 4, 'h': 4, 'group': 'X'}],
            ['a'],
        ):
            with self.subTest(layers=layers):
                with self.assertRaises(ParseError):
                    artifact_io.parse_manifest(self.manifest(layers))

    def test_not_json(self):
        path = self.path('m.json')
        with open(path, 'w') as f:
            f.write('{"name": ')
        with self.assertRaises(ParseError):
            artifact_io.load_manifest(path)

    def test_version(self):
        value = dict(self.manifest([]), schema_version=2)
        with self.assertRaises(SchemaVersionMismatch):
            artifact_io.parse_manifest(value)
        for version in (True, 1.0, '1'):
            with self.subTest(version=version):
                with self.assertRaises(SchemaVersionMismatch):
                    artifact_io.parse_manifest(dict(self.manifest([]), schema_version=version))

    def test_round_trip(self):
        manifest = artifact_io.LayerManifest(name='toy', layers=(
            artifact_io.Layer('q', 8, 8, artifact_io.LayerGroup.Q),
            artifact_io.Layer('up', 16, 8),
        ))
        path = self.path('m.json')
        artifact_io.save_manifest(manifest, path)
        self.assertEqual(artifact_io.load_manifest(path), manifest)


class TestCheckpoint(TempDirMixin, unittest.TestCase):

    def states(self):
        up = InitScheme(up='up_same')
        return {
            'q': build_adapter(AdapterSpec(family='krona', seed=1, d=6, h=8, a1=2, a2=4, init=up, scale=0.5)),
            'k': build_adapter(AdapterSpec(family='lora', seed=2, d=6, h=8, rank=3, init=up)),
            'v': build_adapter(AdapterSpec(family='lokr', seed=3, d=8, h=12, factor=2, rank=2, init=up)),
            'w': build_adapter(AdapterSpec(
                family='lokr', seed=4, d=8, h=12, factor=2, decompose_second=False, init=up
            )),
            'u': build_adapter(AdapterSpec(
                family='lokr', seed=6, d=16, h=16, factor=4, rank=2, decompose_both=True, init=up
            )),
            'o': build_adapter(AdapterSpec(family='loha', seed=5, d=6, h=8, rank=2, init=up)),
        }

    def test_round_trip(self):
        states = self.states()
        path = self.path('ckpt.json')
        artifact_io.save_checkpoint(states, path)
        loaded = artifact_io.load_checkpoint(path)
        self.assertEqual(list(loaded), list(states))
        for name, state in states.items():
            other = loaded[name]
            self.assertEqual(other.family, state.family)
            self.assertEqual((other.d, other.h, other.scale, other.seed), (state.d, state.h, state.scale, state.seed))
            for factor, arr in state.factors().items():
                if arr is None:
                    self.assertIsNone(other.factors()[factor])
                else:
                    assert_array_equal(other.factors()[factor], arr)
                    self.assertEqual(other.factors()[factor].tobytes(), arr.tobytes())

    def test_lokr_headers(self):
        path = self.path('ckpt.json')
        artifact_io.save_checkpoint(self.states(), path)
        with open(path) as f:
            entries = json.load(f)['adapters']
        self.assertEqual((entries['v']['r'], entries['v']['left_r']), (2, None))
        self.assertEqual((entries['w']['r'], entries['w']['left_r']), (None, None))
        self.assertEqual((entries['u']['r'], entries['u']['left_r']), (2, 2))
        self.assertEqual(list(entries['u']['factors']), ['A1', 'A2', 'B', 'C'])
        entries['u']['left_r'] = 3
        path = self.write_json('bad.json', {'schema_version': 1, 'adapters': {'u': entries['u']}})
        with self.assertRaises(ParseError) as cm:
            artifact_io.load_checkpoint(path)
        self.assertEqual(cm.exception.params['layer'], 'u')

    def test_empty(self):
        path = self.path('ckpt.json')
        artifact_io.save_checkpoint({}, path)
        self.assertEqual(dict(artifact_io.load_checkpoint(path)), {})

    def test_corrupt_payload(self):
        path = self.path('ckpt.json')
        artifact_io.save_checkpoint(self.states(), path)
        with open(path) as f:
            value = json.load(f)
        data = value['adapters']['k']['factors']['A']['data']
        value['adapters']['k']['factors']['A']['data'] = data[:-8]
        with open(path, 'w') as f:
            json.dump(value, f)
        with self.assertRaises(ParseError) as cm:
            artifact_io.load_checkpoint(path)
        self.assertEqual(cm.exception.params['layer'], 'k')

    def test_unknown_family(self):
        path = self.write_json('ckpt.json', {
            'schema_version': 1,
            'adapters': {'q': {'family': 'dora', 'factors': {}}},
        })
        with self.assertRaises(ParseError) as cm:
            artifact_io.load_checkpoint(path)
        self.assertEqual(cm.exception.params['layer'], 'q')

    def test_version_required(self):
        path = self.write_json('ckpt.json', {'adapters': {}})
        with self.assertRaises(SchemaVersionMismatch):
            artifact_io.load_checkpoint(path)
        path = self.write_json('ckpt.json', {'schema_version': 99, 'adapters': {}})
        with self.assertRaises(SchemaVersionMismatch):
            artifact_io.load_checkpoint(path)
        path = self.write_json('ckpt.json', {'schema_version': True, 'adapters': {}})
        with self.assertRaises(SchemaVersionMismatch):
            artifact_io.load_checkpoint(path)


class TestEmbeddings(TempDirMixin, unittest.TestCase):

    def setUp(self):
        super().setUp()
        rng = np.random.default_rng(0)
        self.eset = EmbeddingSet(label='dog', vectors=rng.standard_normal((3, 5)), role='reference_images')

    def test_json(self):
        path = self.path('dog.json')
        artifact_io.save_embeddings(self.eset, path)
        loaded = artifact_io.load_embeddings(path)
        self.assertEqual(loaded.label, 'dog')
        self.assertIs(loaded.role, Role.REFERENCE_IMAGES)
        assert_array_equal(loaded.vectors, self.eset.vectors)

    def test_binary(self):
        path = self.path('dog.emb')
        artifact_io.save_embeddings(self.eset, path, binary=True)
        with open(path, 'rb') as f:
            self.assertEqual(f.read(4), b'EMB1')
        loaded = artifact_io.load_embeddings(path, role='generated_images')
        self.assertEqual(loaded.label, 'dog')
        self.assertIs(loaded.role, Role.GENERATED_IMAGES)
        assert_array_equal(loaded.vectors, self.eset.vectors)

    def test_binary_needs_role(self):
        path = self.path('dog.emb')
        artifact_io.save_embeddings(self.eset, path, binary=True)
        with self.assertRaises(ParseError):
            artifact_io.load_embeddings(path)

    def test_truncated(self):
        path = self.path('dog.emb')
        artifact_io.save_embeddings(self.eset, path, binary=True)
        with open(path, 'rb') as f:
            raw = f.read()
        for cut in (6, len(raw) - 3):
            with open(path, 'wb') as f:
                f.write(raw[:cut])
            with self.subTest(cut=cut):
                with self.assertRaises(ParseError):
                    artifact_io.load_embeddings(path, role='prompts')

    def test_role_override(self):
        path = self.path('dog.json')
        artifact_io.save_embeddings(self.eset, path)
        self.assertIs(artifact_io.load_embeddings(path, role='prompts').role, Role.PROMPTS)

    def test_declared_dim(self):
        path = self.write_json('e.json', {'label': 'e', 'role': 'prompts', 'dim': 3, 'vectors': [[1, 0]]})
        with self.assertRaises(ParseError):
            artifact_io.load_embeddings(path)

    def test_missing_fields(self):
        path = self.write_json('e.json', {'label': 'e', 'vectors': [[1, 0]]})
        with self.assertRaises(ParseError):
            artifact_io.load_embeddings(path)

    def test_empty(self):
        path = self.write_json('e.json', {'label': 'e', 'role': 'prompts', 'vectors': []})
        with self.assertRaises(EmptySet):
            artifact_io.load_embeddings(path)


class TestTrainFiles(TempDirMixin, unittest.TestCase):

    def test_config(self):
        path = self.write_json('train.json', {
            'schema_version': 1,
            'learning_rate': 1e-3,
            'steps': 10,
            'adapter': {'family': 'lora', 'rank': 2},
        })
        config = artifact_io.load_train_config(path)
        self.assertEqual(config.steps, 10)
        self.assertEqual(config.adapter, {'family': 'lora', 'rank': 2})
        self.assertEqual(config.optimizer, 'adam')

    def test_config_unknown_field(self):
        path = self.write_json('train.json', {'steps': 10, 'warmup': 5})
        with self.assertRaises(ParseError):
            artifact_io.load_train_config(path)

    def test_history_csv(self):
        path = self.path('history.csv')
        artifact_io.save_history_csv(training.TrainHistory(losses=[0.5, 0.125]), path)
        with open(path) as f:
            self.assertEqual(f.read(), 'step,loss\n0,0.5\n1,0.125\n')
