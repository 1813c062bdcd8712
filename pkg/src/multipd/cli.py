"""
Command-line entry point: sampling, path simulation, verification and the boundary example.

Run parameters are collected in :class:`RunConfig`. Values given on the command line override a
JSON file passed with ``--config``, which overrides the dataclass defaults.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from datetime import datetime, timezone

import numpy as np
import pandas as pd

from . import __version__
from .samplers import (MPDSpec, SeedSpec, sample_dirichlet, sample_grouped_dirichlet,
                       sample_mpd_batch, sample_mpd_chunks, sample_pd_chunks)
from .simplex import ThetaParams, compose_S
from .timechange import build_limit_process, build_skew_product
from .verify import (TARGETS, boundary_frame, boundary_report, reports_to_frame, run_all,
                     write_jsonl)
from .wright_fisher import WFSpec, simulate_wf

logger = logging.getLogger(__name__)

THREADS_VARIABLE = 'MULTIPD_THREADS'

# (command, subject) pairs that simulate the mark-mass diffusion
ENTRANCE_ACTIONS = {('simulate', 'skew'), ('simulate', 'limit'), ('verify', 'moments'),
                    ('verify', 'skew'), ('verify', 'entrance'), ('verify', 'all')}

EPILOG = """\
CSV columns:
  sample dirichlet   z1..zd
  sample pd          atom1..atomN, tail (mass beyond the written atoms)
  sample mpd         w1..wH, z{h}_{i} (top atoms per mark), tail{h} (mass beyond them)
  sample grouped     w1..wH, x{h}_{i}, z{h}_{i}
  simulate wf        t, x1..xd
  simulate skew/limit  t, tau1..tauH, w1..wH, z{h}_{i} (top atoms, ranked)
  demo boundary      n, parity, w1, w2, z{h}_{i}, x{h}_{i}
Reports (--report) are JSON lines: a header object, then one report per line.
"""


@dataclass
class RunConfig:
    """
    Parameters of one run. Only the fields a command uses are read.

    ``theta`` and ``k`` are comma separated lists.
    """

    theta: str = '2,3'
    k: str = '2,4,8'
    n: int = 100_000
    paths: int = 5000
    truncation: int = 1000
    step: float = 1e-3
    ode_step: float = 1e-4
    horizon: float = 1.0
    approx_k: int = 256
    depth: int = 40
    n_max: int = 200
    top: int = 5
    kind: str = 'flat'
    seed: int = 7
    threads: int = 1
    out: str = None
    report: str = None

    @property
    def k_list(self):
        try:
            return [int(item) for item in str(self.k).split(',') if item.strip()]
        except ValueError as err:
            raise ValueError(f'Invalid parameter input. Cannot parse k {self.k!r}.') from err

    @classmethod
    def from_sources(cls, args, environ=None):
        """Defaults, then the JSON config file, then explicitly given flags."""
        environ = os.environ if environ is None else environ
        values = {}
        if environ.get(THREADS_VARIABLE):
            values['threads'] = int(environ[THREADS_VARIABLE])
        if getattr(args, 'config', None):
            with open(args.config, encoding='utf-8') as stream:
                values.update(json.load(stream))
        names = {f.name for f in fields(cls)}
        unknown = set(values) - names
        if unknown:
            raise ValueError(f'Invalid parameter input. Unknown config keys {sorted(unknown)}.')
        for name in names:
            flag = getattr(args, name, None)
            if flag is not None:
                values[name] = flag
        for name in ('theta', 'k'):
            if isinstance(values.get(name), (list, tuple)):
                values[name] = ','.join(str(item) for item in values[name])
        config = cls(**values)
        config.validate(action_of(args))
        return config

    def validate(self, action=None):
        """
        Check every field. ``action`` is the ``(command, subject)`` pair about to run; actions
        that simulate the mark masses also need every theta_h >= 1.

        Raises
        ------
        ValueError
            For any malformed or out-of-range parameter.
        """
        theta = ThetaParams.from_string(self.theta)
        if not self.k_list or min(self.k_list) < 1:
            raise ValueError('Invalid parameter input. k must list positive integers.')
        for name in ('n', 'paths', 'truncation', 'approx_k', 'depth', 'n_max', 'top',
                     'threads'):
            if int(getattr(self, name)) < 1:
                raise ValueError(f'Invalid parameter input. {name} must be >= 1.')
        for name in ('step', 'ode_step', 'horizon'):
            if not float(getattr(self, name)) > 0:
                raise ValueError(f'Invalid parameter input. {name} must be positive.')
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError('Invalid parameter input. seed must be a 64-bit unsigned integer.')
        if self.kind not in WFSpec.kinds:
            raise ValueError(f'Invalid parameter input. Unknown process kind {self.kind!r}.')
        simulates_masses = (action in ENTRANCE_ACTIONS
                            or (action == ('simulate', 'wf') and self.kind == 'mark_mass'))
        if simulates_masses and theta.theta.min() < 1:
            raise ValueError(f'Invalid parameter input. {" ".join(action)} simulates the mark '
                             f'masses and requires every theta_h >= 1, got {self.theta}.')


def action_of(args):
    """The ``(command, subject)`` pair of parsed arguments, e.g. ``('verify', 'all')``."""
    command = getattr(args, 'command', None)
    for name in ('law', 'process', 'target', 'example'):
        subject = getattr(args, name, None)
        if subject is not None:
            return command, subject
    return command, None


def _add_common(parser):
    parser.add_argument('--config', help='JSON file with RunConfig fields')
    parser.add_argument('--theta', help='mutation parameters, e.g. 2,3')
    parser.add_argument('--k', help='types per mark, a comma separated list')
    parser.add_argument('--n', type=int, help='number of draws or replicates')
    parser.add_argument('--seed', type=int, help='master seed')
    parser.add_argument('--threads', type=int,
                        help=f'worker threads (default ${THREADS_VARIABLE} or 1)')
    parser.add_argument('--out', help='CSV output file (default stdout)')
    parser.add_argument('-v', '--verbose', action='count', default=0,
                        help='-v for progress, -vv for debug output')


def build_parser():
    parser = argparse.ArgumentParser(
        prog='multipd', description='Multiple Poisson-Dirichlet diffusions: sampling, '
                                    'simulation and verification.',
        epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    commands = parser.add_subparsers(dest='command', required=True)

    sample = commands.add_parser('sample', help='draw from a stationary law')
    sample.add_argument('law', choices=('dirichlet', 'pd', 'mpd', 'grouped'))
    sample.add_argument('--trunc', dest='truncation', type=int, help='atoms per mark')
    sample.add_argument('--top', type=int, help='atoms per mark written out')
    _add_common(sample)

    simulate = commands.add_parser('simulate', help='simulate one path')
    simulate.add_argument('process', choices=('wf', 'skew', 'limit'))
    simulate.add_argument('--kind', choices=WFSpec.kinds, help='process for simulate wf')
    simulate.add_argument('--step', type=float)
    simulate.add_argument('--horizon', type=float)
    simulate.add_argument('--approx-k', dest='approx_k', type=int)
    simulate.add_argument('--top', type=int)
    _add_common(simulate)

    check = commands.add_parser('verify', help='run verification targets')
    check.add_argument('target', choices=TARGETS + ('all',))
    check.add_argument('--paths', type=int, help='replicate paths for path checks')
    check.add_argument('--trunc', dest='truncation', type=int)
    check.add_argument('--step', type=float)
    check.add_argument('--ode-step', dest='ode_step', type=float)
    check.add_argument('--horizon', type=float)
    check.add_argument('--approx-k', dest='approx_k', type=int)
    check.add_argument('--depth', type=int)
    check.add_argument('--n-max', dest='n_max', type=int)
    check.add_argument('--report', help='JSON lines report file')
    _add_common(check)

    demo = commands.add_parser('demo', help='worked examples')
    demo.add_argument('example', choices=('boundary',))
    demo.add_argument('--depth', type=int)
    demo.add_argument('--n-max', dest='n_max', type=int)
    demo.add_argument('--top', type=int)
    demo.add_argument('--report', help='JSON lines report file')
    _add_common(demo)
    return parser


def _configure_logging(verbosity):
    level = logging.WARNING if verbosity == 0 else logging.INFO if verbosity == 1 \
        else logging.DEBUG
    logging.basicConfig(level=level, stream=sys.stderr,
                        format='%(asctime)s %(name)s %(levelname)s: %(message)s')


def write_frame(frame, out):
    """CSV with fixed float formatting, to a file or stdout."""
    target = out if out else sys.stdout
    frame.to_csv(target, index=False, float_format='%.17g')


def _atom_columns(prefix, atoms, top):
    top = min(top, atoms.shape[-1])
    return {f'{prefix}_{i + 1}': atoms[:, i] for i in range(top)}


def sample_frame(law, config):
    theta = ThetaParams.from_string(config.theta)
    seed = SeedSpec(config.seed)
    if law == 'dirichlet':
        z = sample_dirichlet(theta.theta, seed, size=config.n)
        return pd.DataFrame(z, columns=[f'z{i + 1}' for i in range(theta.H)])
    if law == 'pd':
        atoms, tails = sample_pd_chunks(theta.theta[0], config.truncation, config.n, seed,
                                        top=config.top, threads=config.threads)
        data = {f'atom{i + 1}': atoms[:, i] for i in range(min(config.top, atoms.shape[1]))}
        data['tail'] = tails
        return pd.DataFrame(data)
    if law == 'mpd':
        batch = sample_mpd_chunks(MPDSpec(theta, config.truncation), config.n, seed,
                                  top=config.top, threads=config.threads)
        data = {f'w{h + 1}': batch.masses[:, h] for h in range(theta.H)}
        for h in range(theta.H):
            data.update(_atom_columns(f'z{h + 1}', batch.atoms[:, h], config.top))
            data[f'tail{h + 1}'] = batch.tails[:, h]
        return pd.DataFrame(data)
    K = config.k_list[0]
    zeta, upsilon, xi = sample_grouped_dirichlet(theta, K, seed, size=config.n)
    data = {f'w{h + 1}': upsilon[:, h] for h in range(theta.H)}
    for h in range(theta.H):
        data.update({f'x{h + 1}_{i + 1}': xi[:, h, i] for i in range(K)})
    for h in range(theta.H):
        data.update({f'z{h + 1}_{i + 1}': zeta[:, h, i] for i in range(K)})
    return pd.DataFrame(data)


def simulate_frame(process, config):
    theta = ThetaParams.from_string(config.theta)
    seed = SeedSpec(config.seed)
    K = config.k_list[0]
    w0 = theta.theta / theta.theta_bar
    if process == 'wf':
        if config.kind == 'mark_mass':
            spec, init = WFSpec.mark_mass(theta, config.step, config.horizon), w0
        elif config.kind == 'symmetric':
            spec = WFSpec.symmetric(theta.theta[0], K, config.step, config.horizon)
            init = np.full(K, 1 / K)
        else:
            spec = WFSpec.flat(theta, K, config.step, config.horizon)
            init = compose_S(w0, [np.full(K, 1 / K)] * theta.H).z
        return simulate_wf(spec, init, seed).to_frame()
    if process == 'skew':
        trajectory = build_skew_product(theta, K, (w0, np.full((theta.H, K), 1 / K)), seed,
                                        config.step, config.horizon)
        return trajectory.to_frame(config.top)
    start = sample_mpd_batch(MPDSpec(theta, config.truncation), 1, seed.stream(1)).point(0)
    trajectory = build_limit_process(theta, config.approx_k, start, seed, config.step,
                                     config.horizon)
    return trajectory.to_frame(config.top)


def _finish_reports(reports, config, command):
    table = reports_to_frame(reports)
    print(table.to_string(index=False))
    if config.report:
        header = {'command': command, 'version': __version__, 'config': asdict(config),
                  'created': datetime.now(timezone.utc).isoformat()}
        write_jsonl(config.report, reports, header)
    unexpected = [report.name for report in reports if report.unexpected]
    if unexpected:
        logger.error('Unexpected outcomes: %s', ', '.join(unexpected))
        return 1
    return 0


def run(argv=None):
    """
    Execute one command.

    Returns
    -------
    int
        0 on success, 1 if a verification outcome was unexpected, 2 on invalid parameters.
    """
    args = build_parser().parse_args(argv)
    _configure_logging(args.verbose)
    try:
        config = RunConfig.from_sources(args)
        logger.info('Running %s with %s', args.command, config)
        if args.command == 'sample':
            write_frame(sample_frame(args.law, config), config.out)
            return 0
        if args.command == 'simulate':
            write_frame(simulate_frame(args.process, config), config.out)
            return 0
        if args.command == 'demo':
            if config.out:
                write_frame(boundary_frame(config.depth, config.n_max, config.top), config.out)
            reports = boundary_report(config.depth, config.n_max,
                                      ThetaParams.from_string(config.theta))
            return _finish_reports(reports, config, 'demo boundary')
        targets = TARGETS if args.target == 'all' else (args.target,)
        return _finish_reports(run_all(config, targets), config, f'verify {args.target}')
    except ValueError as err:
        logger.error('%s', err)
        return 2


def main():
    sys.exit(run())
