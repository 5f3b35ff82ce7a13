# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#    http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
# implied.
# See the License for the specific language governing permissions and
# limitations under the License.

import argparse
import io
import json
import os
from unittest import mock

import fixtures
import numpy as np
from osc_lib.tests import utils

from ewastenet.common import exceptions
from ewastenet.common import utils as ewaste_utils
from ewastenet import evaluation
from ewastenet import model
from ewastenet import shell
from ewastenet import synthetic
from ewastenet import training


def _toy_run_config(path, epochs=1):
    with open(path, 'w') as fp:
        json.dump({'model': model.toy_config().to_dict(),
                   'train': {'epochs': epochs, 'batch_size': 8,
                             'augment': False},
                   'eval': {'batch_size': 8}}, fp)
    return path


class BaseTest(utils.TestCommand):
    def setUp(self):
        super(BaseTest, self).setUp()
        self.tmp = self.useFixture(fixtures.TempDir()).path
        self.useFixture(fixtures.EnvironmentVariable(
            ewaste_utils.SEED_ENV))
        self.root = os.path.join(self.tmp, 'data')
        synthetic.synthesize_dataset(self.root, per_class=4, size=16,
                                     seed=1)

    def path(self, *parts):
        return os.path.join(self.tmp, *parts)


class TestSplit(BaseTest):
    def test_split(self):
        out = self.path('split.json')
        arglist = ['--data', self.root, '--seed', '3', '--out', out]
        verifylist = [('data', self.root), ('seed', 3), ('out', out),
                      ('ratios', (0.7, 0.1, 0.2))]

        cmd = shell.SplitCommand(self.app, None)
        parsed_args = self.check_parser(cmd, arglist, verifylist)
        columns, rows = cmd.take_action(parsed_args)

        self.assertEqual(shell.SplitCommand.COLUMNS, columns)
        self.assertEqual(len(synthetic.CLASSES) + 1, len(rows))
        self.assertEqual(('Camera', 3, 0, 1), rows[0])
        self.assertEqual(('Total', 24, 0, 8), rows[-1])
        with open(out) as fp:
            first = fp.read()

        cmd.take_action(parsed_args)
        with open(out) as fp:
            self.assertEqual(first, fp.read())

    def test_custom_ratios(self):
        arglist = ['--data', self.root, '--ratios', '0.5,0.25,0.25']
        cmd = shell.SplitCommand(self.app, None)
        parsed_args = self.check_parser(cmd, arglist,
                                        [('ratios', (0.5, 0.25, 0.25))])
        _c, rows = cmd.take_action(parsed_args)
        self.assertEqual(('Total', 16, 8, 8), rows[-1])

    def test_bad_ratios(self):
        cmd = shell.SplitCommand(self.app, None)
        for ratios in ('0.7,0.7,0.2', '0.5,0.5', 'a,b,c'):
            self.assertRaises(utils.ParserException, self.check_parser, cmd,
                              ['--data', self.root, '--ratios', ratios], [])

    def test_data_required(self):
        cmd = shell.SplitCommand(self.app, None)
        self.assertRaises(utils.ParserException, self.check_parser, cmd,
                          [], [])

    def test_empty_dataset(self):
        os.makedirs(self.path('empty'))
        cmd = shell.SplitCommand(self.app, None)
        parsed_args = self.check_parser(cmd, ['--data', self.path('empty')],
                                        [])
        self.assertRaises(exceptions.DatasetError, cmd.take_action,
                          parsed_args)


class TestPipeline(BaseTest):
    def setUp(self):
        super(TestPipeline, self).setUp()
        self.config = _toy_run_config(self.path('run.json'))
        self.out = self.path('run')

    def _train(self, *extra):
        arglist = ['--data', self.root, '--config', self.config,
                   '--out', self.out, '--seed', '5'] + list(extra)
        cmd = shell.TrainCommand(self.app, None)
        parsed_args = self.check_parser(cmd, arglist,
                                        [('seed', 5), ('out', self.out)])
        return cmd.take_action(parsed_args)

    def _eval(self, out=None, *extra):
        arglist = ['--ckpt', os.path.join(self.out, training.FINAL),
                   '--data', self.root,
                   '--split', os.path.join(self.out, shell.SPLIT_FILE),
                   '--config', self.config] + list(extra)
        if out:
            arglist += ['--out', out]
        cmd = shell.EvalCommand(self.app, None)
        parsed_args = self.check_parser(cmd, arglist, [])
        return cmd.take_action(parsed_args)

    def test_train_eval_predict(self):
        columns, rows = self._train()
        self.assertEqual(shell.TrainCommand.COLUMNS, columns)
        self.assertEqual(1, len(rows))
        self.assertEqual(1, rows[0][0])
        self.assertIsNone(rows[0][4])
        for name in (training.FINAL, training.BEST):
            self.assertTrue(os.path.exists(
                os.path.join(self.out, name, training.MANIFEST)))
        for name in (shell.SPLIT_FILE, shell.RUN_CONFIG, training.HISTORY):
            self.assertTrue(os.path.exists(os.path.join(self.out, name)))

        labels, values = self._eval(self.path('report1'))
        self.assertEqual(shell.res.MetricsResource().labels, labels)
        summary = dict(zip(labels, values))
        self.assertEqual('test', summary['Split'])
        self.assertEqual(8, summary['Samples'])
        self.assertIn('Micro-average AUC', summary)
        self._eval(self.path('report2'))
        for name in (evaluation.REPORT_JSON, evaluation.CONFUSION_CSV,
                     evaluation.ROC_CSV):
            with open(self.path('report1', name), 'rb') as fp:
                first = fp.read()
            with open(self.path('report2', name), 'rb') as fp:
                self.assertEqual(first, fp.read())

        labels, _values = self._eval(None, '--subset', 'train', '--fields',
                                     'mcc', 'samples')
        self.assertEqual(('MCC', 'Samples'), labels)
        labels, _values = self._eval(None, '--long')
        self.assertEqual(len(shell.res.MetricsResource.FIELDS), len(labels))

        image = os.path.join(self.root, 'Camera', '000.ppm')
        cmd = shell.PredictCommand(self.app, None)
        parsed_args = self.check_parser(
            cmd, ['--ckpt', os.path.join(self.out, training.BEST),
                  '--image', image], [('image', image)])
        cmd.take_action(parsed_args)
        cmd.take_action(parsed_args)
        first, second = ''.join(self.fake_stdout.content).splitlines()
        self.assertEqual(first, second)
        result = json.loads(first)
        probs = result['probabilities']
        self.assertEqual(set(synthetic.CLASSES), set(probs))
        self.assertAlmostEqual(1.0, sum(probs.values()), delta=1e-6)
        self.assertEqual(max(probs, key=probs.get), result['class_name'])

    def test_epochs_flag_and_split_file(self):
        split = self.path('split.json')
        cmd = shell.SplitCommand(self.app, None)
        cmd.take_action(self.check_parser(
            cmd, ['--data', self.root, '--seed', '2', '--out', split], []))
        _c, rows = self._train('--epochs', '2', '--split', split)
        self.assertEqual([1, 2], [row[0] for row in rows])
        self.assertFalse(os.path.exists(
            os.path.join(self.out, shell.SPLIT_FILE)))

    def test_missing_checkpoint(self):
        cmd = shell.EvalCommand(self.app, None)
        parsed_args = self.check_parser(
            cmd, ['--ckpt', self.path('nowhere'), '--data', self.root,
                  '--split', self.path('split.json')], [])
        exc = self.assertRaises(exceptions.CheckpointNotFound,
                                cmd.take_action, parsed_args)
        self.assertEqual(2, shell.exit_code(exc))

    def test_fields_and_long_exclusive(self):
        cmd = shell.EvalCommand(self.app, None)
        self.assertRaises(utils.ParserException, self.check_parser, cmd,
                          ['--ckpt', 'c', '--data', 'd', '--split', 's',
                           '--long', '--fields', 'mcc'], [])


class TestParameters(BaseTest):
    def test_default_model(self):
        cmd = shell.ParametersCommand(self.app, None)
        columns, rows = cmd.take_action(self.check_parser(cmd, [], []))
        self.assertEqual(shell.ParametersCommand.COLUMNS, columns)
        self.assertEqual(list(model.GROUPS),
                         [row[0] for row in rows[:-1]])
        for _group, trainable, frozen, analytic, _b in rows[:-1]:
            self.assertEqual(analytic, trainable + frozen)
        self.assertEqual(('Total', 713582, 18, 713600, 'within 1000000'),
                         rows[-1])

    def test_frozen_backbones(self):
        cmd = shell.ParametersCommand(self.app, None)
        _c, rows = cmd.take_action(self.check_parser(
            cmd, ['--freeze-backbones'], [('freeze_backbones', True)]))
        self.assertEqual(713582 - 2 * 216768, rows[-1][1])
        self.assertEqual(18 + 2 * 216768, rows[-1][2])


class TestCheck(BaseTest):
    def test_passing(self):
        cmd = shell.CheckCommand(self.app, None)
        parsed_args = self.check_parser(
            cmd, ['--check', 'sobel', '--check', 'roc'],
            [('checks', ['sobel', 'roc'])])
        columns, rows = cmd.take_action(parsed_args)
        self.assertEqual(shell.CheckCommand.COLUMNS, columns)
        self.assertEqual([('sobel', 'pass'), ('roc', 'pass')],
                         [row[:2] for row in rows])

    def test_failure_is_named(self):
        cmd = shell.CheckCommand(self.app, None)
        parsed_args = self.check_parser(
            cmd, ['-f', 'value', '--check', 'sobel', '--check', 'metrics'],
            [])
        with mock.patch.object(model, 'SOBEL_X', np.zeros((3, 3))):
            exc = self.assertRaises(exceptions.CheckFailed, cmd.run,
                                    parsed_args)
        self.assertEqual(['sobel'], exc.failed)
        self.assertEqual(1, shell.exit_code(exc))
        output = ''.join(self.fake_stdout.content)
        self.assertIn('FAIL', output)
        self.assertIn('metrics pass', output)

    def test_unknown_check(self):
        cmd = shell.CheckCommand(self.app, None)
        self.assertRaises(utils.ParserException, self.check_parser, cmd,
                          ['--check', 'everything'], [])


class TestSynthesize(BaseTest):
    def test_writes_dataset(self):
        out = self.path('synthetic')
        cmd = shell.SynthesizeCommand(self.app, None)
        parsed_args = self.check_parser(
            cmd, [out, '--per-class', '2', '--size', '12'],
            [('out', out), ('per_class', 2), ('size', 12)])
        self.assertIsNone(cmd.take_action(parsed_args))
        self.assertEqual(sorted(synthetic.CLASSES), sorted(os.listdir(out)))
        self.assertEqual(['000.ppm', '001.ppm'],
                         sorted(os.listdir(os.path.join(out, 'TV'))))


class TestExitCodes(utils.TestCase):
    def test_mapping(self):
        for error, code in (
                (exceptions.CheckFailed(['sobel']), 1),
                (exceptions.ConfigError('bad'), 2),
                (exceptions.CheckpointNotFound('/ckpt'), 2),
                (exceptions.DatasetError('empty'), 3),
                (exceptions.ImageDecodeError('/x.ppm', 'truncated'), 3),
                (exceptions.CheckpointError('corrupt'), 3),
                (FileNotFoundError('x'), 3),
                (RuntimeError('x'), 1)):
            self.assertEqual(code, shell.exit_code(error), error)

    def test_wrapped_usage_error(self):
        try:
            try:
                raise SystemExit(2)
            except SystemExit as exc:
                raise RuntimeError('usage') from exc
        except RuntimeError as wrapped:
            self.assertEqual(2, shell.exit_code(wrapped))

    def test_ratios_type(self):
        self.assertEqual((0.6, 0.2, 0.2), shell.ratios_type('0.6,0.2,0.2'))
        self.assertRaises(argparse.ArgumentTypeError, shell.ratios_type,
                          '0.6,0.2')


class TestMain(utils.TestCase):
    def setUp(self):
        super(TestMain, self).setUp()
        self.stdout = io.StringIO()
        self.useFixture(fixtures.MonkeyPatch('sys.stdout', self.stdout))
        self.useFixture(fixtures.MonkeyPatch('sys.stderr', io.StringIO()))

    def test_check_passes(self):
        self.assertEqual(0, shell.main(['check', '--check', 'sobel',
                                        '-f', 'value']))
        self.assertIn('sobel pass', self.stdout.getvalue())

    def test_check_fails(self):
        with mock.patch.object(model, 'SOBEL_X', np.zeros((3, 3))):
            self.assertEqual(1, shell.main(['check', '--check', 'sobel',
                                            '-f', 'value']))
        self.assertIn('sobel FAIL', self.stdout.getvalue())

    def test_usage_error(self):
        self.assertEqual(2, shell.main(['split']))

    def test_config_error(self):
        tmp = self.useFixture(fixtures.TempDir()).path
        path = os.path.join(tmp, 'run.yaml')
        with open(path, 'w') as fp:
            fp.write('train: {epochs: 0}\n')
        self.assertEqual(2, shell.main(['parameters', '--config', path]))

    def test_missing_dataset(self):
        tmp = self.useFixture(fixtures.TempDir()).path
        self.assertEqual(3, shell.main(['split', '--data',
                                        os.path.join(tmp, 'none')]))
