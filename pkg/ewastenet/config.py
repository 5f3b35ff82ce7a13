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

"""Run configuration files.

A run configuration is a JSON or YAML mapping with the optional sections
``data``, ``model``, ``train`` and ``eval``::

    data:
      ratios: [0.7, 0.1, 0.2]
      augment: {rotation_deg_max: 20}
    model:
      image_h: 64
      image_w: 64
      backbone: {depth: 4}
    train:
      epochs: 20
      seed: 42
    eval:
      split: test

Every key has a default; unknown keys are rejected.
"""

import dataclasses
import logging
import typing

import yaml

from ewastenet.common import exceptions
from ewastenet.common.i18n import _
from ewastenet.common import utils
from ewastenet import data as ewaste_data
from ewastenet import model as ewaste_model
from ewastenet import training


LOG = logging.getLogger(__name__)

SECTIONS = ('data', 'model', 'train', 'eval')


@dataclasses.dataclass
class DataConfig:
    """Dataset preparation settings.

    :ivar background_removal: executable run on every image before
        resizing, see :py:class:`ewastenet.data.BackgroundRemovalHook`.
    """
    ratios: tuple = ewaste_data.DEFAULT_RATIOS
    augment: ewaste_data.AugmentationSpec = dataclasses.field(
        default_factory=ewaste_data.AugmentationSpec)
    background_removal: typing.Optional[str] = None
    workers: int = 2

    def validate(self):
        ewaste_data.validate_ratios(self.ratios)
        self.augment.validate()
        if isinstance(self.workers, bool) or not isinstance(
                self.workers, int) or self.workers < 1:
            raise exceptions.ConfigError(_('data.workers must be positive'))
        return self

    def to_dict(self):
        return {'ratios': list(self.ratios),
                'augment': self.augment.to_dict(),
                'background_removal': self.background_removal,
                'workers': self.workers}

    @classmethod
    def from_dict(cls, values, section='data'):
        values = dict(utils.check_keys(
            values, [f.name for f in dataclasses.fields(cls)], section))
        if 'ratios' in values:
            values['ratios'] = tuple(values['ratios'])
        values['augment'] = ewaste_data.AugmentationSpec.from_dict(
            values.get('augment'), section + '.augment')
        return cls(**values)

    def hook(self):
        if self.background_removal:
            return ewaste_data.BackgroundRemovalHook(
                self.background_removal)
        return None


@dataclasses.dataclass
class EvalConfig:
    split: str = 'test'
    batch_size: int = 16

    def validate(self):
        violations = []
        if self.split not in ewaste_data.SPLITS:
            violations.append(_('eval.split must be one of %s') %
                              ', '.join(ewaste_data.SPLITS))
        if isinstance(self.batch_size, bool) or not isinstance(
                self.batch_size, int) or self.batch_size < 1:
            violations.append(_('eval.batch_size must be positive'))
        if violations:
            raise exceptions.ConfigError(violations)
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values, section='eval'):
        return cls(**utils.check_keys(
            values, [f.name for f in dataclasses.fields(cls)], section))


@dataclasses.dataclass
class RunConfig:
    data: DataConfig = dataclasses.field(default_factory=DataConfig)
    model: ewaste_model.EWasteNetConfig = dataclasses.field(
        default_factory=ewaste_model.EWasteNetConfig)
    train: training.TrainConfig = dataclasses.field(
        default_factory=training.TrainConfig)
    eval: EvalConfig = dataclasses.field(default_factory=EvalConfig)

    def validate(self):
        """Validate every section.

        :raises: ConfigError naming the violated invariants.
        """
        self.data.validate()
        self.model.validate()
        self.train.validate()
        self.eval.validate()
        return self

    def to_dict(self):
        return {'data': self.data.to_dict(),
                'model': self.model.to_dict(),
                'train': self.train.to_dict(),
                'eval': self.eval.to_dict()}

    @classmethod
    def from_dict(cls, values):
        values = utils.check_keys(values, SECTIONS, 'run configuration')
        try:
            return cls(
                data=DataConfig.from_dict(values.get('data')),
                model=ewaste_model.EWasteNetConfig.from_dict(
                    values.get('model')),
                train=training.TrainConfig.from_dict(values.get('train')),
                eval=EvalConfig.from_dict(values.get('eval')))
        except TypeError as exc:
            raise exceptions.ConfigError(str(exc))

    def seed(self, override=None):
        """Seed of the run: override, then the file, then the environment."""
        return utils.resolve_seed(override, self.train.seed)


def load(path=None):
    """Load and validate a run configuration.

    :param path: JSON or YAML file, None gives the defaults.
    :raises: ConfigError if the document is malformed or invalid.
    """
    if path is None:
        return RunConfig().validate()
    with open(path, 'r', encoding='utf-8') as fp:
        try:
            values = yaml.safe_load(fp)
        except yaml.YAMLError as exc:
            raise exceptions.ConfigError(
                _('Cannot parse %(path)s: %(err)s') % {'path': path,
                                                       'err': exc})
    LOG.debug('Loaded run configuration from %s', path)
    return RunConfig.from_dict(values).validate()
