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

"""Command line interface of EWasteNet."""

import argparse
import json
import logging
import os
import sys

from cliff import app
from cliff import command
from cliff import commandmanager
from cliff import lister
from cliff import show
import numpy as np

from ewastenet import checks
from ewastenet.common import exceptions
from ewastenet.common.i18n import _
from ewastenet.common import utils
from ewastenet import config
from ewastenet import data
from ewastenet import evaluation
from ewastenet import model
from ewastenet import resource as res
from ewastenet import synthetic
from ewastenet import training
from ewastenet import version


LOG = logging.getLogger(__name__)

COMMAND_NAMESPACE = 'ewastenet.cli'
SPLIT_FILE = 'split.json'
RUN_CONFIG = 'run.json'

EXIT_CODES = (
    (exceptions.CheckFailed, 1),
    (exceptions.ConfigError, 2),
    (exceptions.CheckpointNotFound, 2),
    (exceptions.DatasetError, 3),
    (exceptions.ImageDecodeError, 3),
    (exceptions.CheckpointError, 3),
    (OSError, 3),
)
"""Process exit code of each error class, first match wins."""


def exit_code(error):
    # cliff wraps the SystemExit of a failed argument parse
    cause = getattr(error, '__cause__', None)
    if isinstance(cause, SystemExit):
        return cause.code
    for error_class, code in EXIT_CODES:
        if isinstance(error, error_class):
            return code
    return 1


def ratios_type(value):
    """Parse ``a,b,c`` split ratios for argparse."""
    try:
        ratios = tuple(float(x) for x in value.split(','))
        return data.validate_ratios(ratios)
    except (ValueError, exceptions.ConfigError) as exc:
        raise argparse.ArgumentTypeError(
            _('invalid ratios %(value)s: %(err)s') % {'value': value,
                                                      'err': exc})


def _image_size(cfg):
    return cfg.image_h, cfg.image_w


def _dataset(index, spec, tag, run, seed, augmentation=None):
    return data.ImageDataset(index, spec.select(index, tag),
                             _image_size(run.model),
                             augmentation=augmentation, seed=seed,
                             hook=run.data.hook(),
                             workers=run.data.workers)


class SplitCommand(lister.Lister):
    """Assign the images of a dataset to train, validation and test."""

    COLUMNS = ('Class', 'Train', 'Validation', 'Test')

    def get_parser(self, prog_name):
        parser = super(SplitCommand, self).get_parser(prog_name)
        parser.add_argument('--data', required=True,
                            help='dataset root with one directory per class')
        parser.add_argument('--ratios', type=ratios_type,
                            default=data.DEFAULT_RATIOS,
                            help='train,validation,test fractions '
                            '(default: 0.7,0.1,0.2)')
        parser.add_argument('--seed', type=int, default=None,
                            help='split seed (env: %s)' % utils.SEED_ENV)
        parser.add_argument('--out', metavar='<filename>',
                            help='write the split to this file')
        return parser

    def take_action(self, parsed_args):
        index = data.scan_dataset(parsed_args.data)
        seed = utils.resolve_seed(parsed_args.seed)
        spec = data.split_dataset(index, parsed_args.ratios, seed)
        if parsed_args.out:
            spec.save(parsed_args.out)
        rows = spec.counts(index)
        totals = tuple(sum(row[k] for row in rows) for k in range(1, 4))
        return self.COLUMNS, rows + [('Total',) + totals]


class TrainCommand(lister.Lister):
    """Train EWasteNet and write checkpoints."""

    COLUMNS = ('Epoch', 'Loss', 'Accuracy', 'Validation Loss',
               'Validation Accuracy')

    def get_parser(self, prog_name):
        parser = super(TrainCommand, self).get_parser(prog_name)
        parser.add_argument('--data', required=True,
                            help='dataset root with one directory per class')
        parser.add_argument('--split', metavar='<filename>',
                            help='split file written by "split", a fresh '
                            'split is made and saved to the output '
                            'directory if omitted')
        parser.add_argument('--config', metavar='<filename>',
                            help='JSON or YAML run configuration')
        parser.add_argument('--out', required=True,
                            help='output directory for checkpoints')
        parser.add_argument('--epochs', type=int, default=None,
                            help='number of epochs (default: 20)')
        parser.add_argument('--seed', type=int, default=None,
                            help='run seed (env: %s)' % utils.SEED_ENV)
        parser.add_argument('--freeze-backbones', action='store_true',
                            help='train only the layers outside the two '
                            'transformer backbones')
        return parser

    def _progress(self, epoch, train, val):
        print(_('Epoch %(epoch)d: loss %(loss).4f, validation accuracy '
                '%(val)s') % {'epoch': epoch, 'loss': train.loss,
                              'val': 'n/a' if val is None
                              else '%.4f' % val.accuracy},
              file=self.app.stderr)

    def take_action(self, parsed_args):
        run = config.load(parsed_args.config)
        if parsed_args.epochs is not None:
            run.train.epochs = parsed_args.epochs
        if parsed_args.freeze_backbones:
            run.train.freeze_backbones = True
        run.train.seed = run.seed(parsed_args.seed)
        run.validate()
        seed = run.train.seed

        index = data.scan_dataset(parsed_args.data)
        os.makedirs(parsed_args.out, exist_ok=True)
        if parsed_args.split:
            spec = data.SplitSpec.load(parsed_args.split)
        else:
            spec = data.split_dataset(index, run.data.ratios, seed)
            split_path = os.path.join(parsed_args.out, SPLIT_FILE)
            spec.save(split_path)
            LOG.info('No split file given, saved a new split to %s',
                     split_path)
        utils.atomic_write(os.path.join(parsed_args.out, RUN_CONFIG),
                           utils.dump_json(run.to_dict()))

        train_set = _dataset(index, spec, 'train', run, seed,
                             augmentation=run.data.augment)
        val_set = _dataset(index, spec, 'val', run, seed)
        net = model.build_model(run.model, seed)
        if run.train.freeze_backbones:
            model.freeze_backbones(net.params)
        trainable, frozen = net.count_trainable_parameters()
        print(_('Trainable parameters: %(trainable)d, frozen: %(frozen)d') %
              {'trainable': trainable, 'frozen': frozen},
              file=self.app.stderr)

        result = training.fit(net, train_set, val_set, run.train,
                              out_dir=parsed_args.out, classes=index.classes,
                              callback=self._progress)
        history = result.history
        rows = list(zip(range(1, len(history) + 1), history.train_loss,
                        history.train_accuracy, history.val_loss,
                        history.val_accuracy))
        return self.COLUMNS, rows


class EvalCommand(show.ShowOne):
    """Evaluate a checkpoint on one split of a dataset."""

    def get_parser(self, prog_name):
        parser = super(EvalCommand, self).get_parser(prog_name)
        parser.add_argument('--ckpt', required=True,
                            help='checkpoint directory')
        parser.add_argument('--data', required=True,
                            help='dataset root with one directory per class')
        parser.add_argument('--split', required=True, metavar='<filename>',
                            help='split file written by "split"')
        parser.add_argument('--subset', choices=data.SPLITS, default=None,
                            help='split to evaluate (default: test)')
        parser.add_argument('--config', metavar='<filename>',
                            help='JSON or YAML run configuration')
        parser.add_argument('--out',
                            help='write report.json, confusion.csv and '
                            'roc.csv to this directory')
        display_group = parser.add_mutually_exclusive_group()
        display_group.add_argument(
            '--long', dest='detail',
            action='store_true', default=False,
            help="Show all metrics.")
        display_group.add_argument(
            '--fields', nargs='+', dest='fields',
            metavar='<field>',
            choices=sorted(res.MetricsResource(detailed=True).fields),
            help="Display one or more fields.  "
            "Can not be used when '--long' is specified")
        return parser

    def take_action(self, parsed_args):
        run = config.load(parsed_args.config)
        checkpoint = training.load_checkpoint(parsed_args.ckpt)
        index = data.scan_dataset(parsed_args.data)
        if checkpoint.classes and tuple(checkpoint.classes) != index.classes:
            raise exceptions.DatasetError(
                _('Dataset classes do not match the checkpoint classes'),
                sorted(set(index.classes) ^ set(checkpoint.classes)))
        spec = data.SplitSpec.load(parsed_args.split)
        subset = parsed_args.subset or run.eval.split
        dataset = data.ImageDataset(index, spec.select(index, subset),
                                    _image_size(checkpoint.model.cfg),
                                    hook=run.data.hook(),
                                    workers=run.data.workers)

        result = training.evaluate_split(checkpoint.model, dataset,
                                         run.eval.batch_size)
        report = evaluation.build_report(result.labels, result.probabilities,
                                         index.classes)
        if parsed_args.out:
            evaluation.write_report(report, parsed_args.out)

        summary = report.to_dict()
        summary.update(split=subset, samples=len(dataset),
                       undefined=', '.join(report.undefined) or None)
        metrics_res = res.MetricsResource(parsed_args.fields,
                                          parsed_args.detail)
        return metrics_res.labels, metrics_res.row(summary)


class PredictCommand(command.Command):
    """Classify one image and print the class probabilities as JSON."""

    def get_parser(self, prog_name):
        parser = super(PredictCommand, self).get_parser(prog_name)
        parser.add_argument('--ckpt', required=True,
                            help='checkpoint directory')
        parser.add_argument('--image', required=True,
                            help='PPM or PNG image')
        return parser

    def take_action(self, parsed_args):
        checkpoint = training.load_checkpoint(parsed_args.ckpt)
        net = checkpoint.model
        pixels = data.resize(data.decode_image(parsed_args.image),
                             *_image_size(net.cfg))
        probs = net.predict(data.normalize(pixels))[0].astype(np.float64)
        probs /= probs.sum()
        classes = checkpoint.classes or tuple(
            str(k) for k in range(len(probs)))
        result = {'class_name': classes[int(np.argmax(probs))],
                  'probabilities': {name: float(p)
                                    for name, p in zip(classes, probs)}}
        json.dump(result, self.app.stdout, sort_keys=True)
        self.app.stdout.write('\n')


class CheckCommand(lister.Lister):
    """Run the numerical self-checks."""

    COLUMNS = ('Check', 'Result', 'Detail')

    def get_parser(self, prog_name):
        parser = super(CheckCommand, self).get_parser(prog_name)
        parser.add_argument('--check', action='append', dest='checks',
                            choices=checks.names(), default=None,
                            help='run only this check, can be repeated')
        parser.add_argument('--seed', type=int, default=0,
                            help='seed of the random inputs (default: 0)')
        return parser

    def take_action(self, parsed_args):
        self.results = checks.run_checks(parsed_args.checks,
                                         seed=parsed_args.seed)
        rows = [(r.name, 'pass' if r.passed else 'FAIL', r.detail)
                for r in self.results]
        return self.COLUMNS, rows

    def run(self, parsed_args):
        result = super(CheckCommand, self).run(parsed_args)
        failed = [r.name for r in self.results if not r.passed]
        if failed:
            raise exceptions.CheckFailed(failed)
        return result


class ParametersCommand(lister.Lister):
    """List parameter counts per group of the configured model."""

    COLUMNS = ('Group', 'Trainable', 'Frozen', 'Closed Form', 'Budget')

    def get_parser(self, prog_name):
        parser = super(ParametersCommand, self).get_parser(prog_name)
        parser.add_argument('--config', metavar='<filename>',
                            help='JSON or YAML run configuration')
        parser.add_argument('--freeze-backbones', action='store_true',
                            help='count the backbones as frozen')
        return parser

    def take_action(self, parsed_args):
        run = config.load(parsed_args.config)
        net = model.build_model(run.model)
        if parsed_args.freeze_backbones or run.train.freeze_backbones:
            model.freeze_backbones(net.params)
        analytic = model.analytic_parameter_count(run.model)
        rows = [(group, trainable, frozen, analytic.get(group), None)
                for group, trainable, frozen in model.parameter_table(
                    net.params)]
        trainable, frozen = net.count_trainable_parameters()
        verdict = (_('within %d') if trainable < model.PARAMETER_BUDGET
                   else _('exceeds %d')) % model.PARAMETER_BUDGET
        rows.append(('Total', trainable, frozen, sum(analytic.values()),
                     verdict))
        return self.COLUMNS, rows


class SynthesizeCommand(command.Command):
    """Write the synthetic example dataset."""

    def get_parser(self, prog_name):
        parser = super(SynthesizeCommand, self).get_parser(prog_name)
        parser.add_argument('out', help='output directory')
        parser.add_argument('--per-class', type=int, default=8,
                            help='images per class (default: 8)')
        parser.add_argument('--size', type=int, default=64,
                            help='image side in pixels (default: 64)')
        parser.add_argument('--seed', type=int, default=0,
                            help='drawing seed (default: 0)')
        return parser

    def take_action(self, parsed_args):
        synthetic.synthesize_dataset(parsed_args.out,
                                     per_class=parsed_args.per_class,
                                     size=parsed_args.size,
                                     seed=parsed_args.seed)


COMMANDS = {
    'split': SplitCommand,
    'train': TrainCommand,
    'eval': EvalCommand,
    'predict': PredictCommand,
    'check': CheckCommand,
    'parameters': ParametersCommand,
    'synthesize': SynthesizeCommand,
}


class EWasteNetApp(app.App):
    """The ``ewastenet`` command.

    Failing commands exit with the code :py:data:`EXIT_CODES` assigns to
    their error.
    """

    def __init__(self):
        super(EWasteNetApp, self).__init__(
            description=_('Two-stream e-waste image classifier'),
            version=version.version_info.version_string(),
            command_manager=commandmanager.CommandManager(COMMAND_NAMESPACE),
            deferred_help=True)
        for name, command_class in COMMANDS.items():
            self.command_manager.add_command(name, command_class)
        self._error = None

    def clean_up(self, cmd, result, err):
        self._error = err

    def run_subcommand(self, argv):
        self._error = None
        result = super(EWasteNetApp, self).run_subcommand(argv)
        if self._error is not None:
            return exit_code(self._error)
        return result


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        return EWasteNetApp().run(argv)
    except SystemExit as exc:
        # argparse reports usage errors with exit status 2
        return exc.code
