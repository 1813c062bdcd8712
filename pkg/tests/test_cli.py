"""
Testing of the command-line interface and its configuration handling.
"""
import json

import numpy as np
import pandas as pd
import pytest
from pytest import approx

from multipd.cli import RunConfig, action_of, build_parser, run
from multipd.verify import TestReport


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / 'run.json'
    path.write_text(json.dumps({'theta': [1.5, 2.5], 'n': 50, 'seed': 3}))
    return path


class TestRunConfig:

    def test_defaults(self):
        args = build_parser().parse_args(['sample', 'mpd'])
        config = RunConfig.from_sources(args, environ={})
        assert config.theta == '2,3'
        assert config.threads == 1
        assert config.k_list == [2, 4, 8]

    def test_precedence(self, config_file):
        """Flags override the JSON file, which overrides the environment and defaults."""
        args = build_parser().parse_args(['sample', 'mpd', '--config', str(config_file),
                                          '--n', '20'])
        config = RunConfig.from_sources(args, environ={'MULTIPD_THREADS': '3'})
        assert config.theta == '1.5,2.5'
        assert config.n == 20
        assert config.seed == 3
        assert config.threads == 3

    def test_unknown_key(self, tmp_path):
        path = tmp_path / 'bad.json'
        path.write_text(json.dumps({'thetas': '1,2'}))
        args = build_parser().parse_args(['sample', 'mpd', '--config', str(path)])
        with pytest.raises(ValueError):
            RunConfig.from_sources(args, environ={})

    @pytest.mark.parametrize('changes', [{'theta': '0,2'}, {'k': '2,x'}, {'k': '0'},
                                         {'n': 0}, {'step': -1.0}, {'seed': -1},
                                         {'kind': 'other'}])
    def test_invalid(self, changes):
        with pytest.raises(ValueError):
            RunConfig(**changes).validate()

    @pytest.mark.parametrize('action', [('verify', 'all'), ('verify', 'moments'),
                                        ('verify', 'entrance'), ('simulate', 'skew'),
                                        ('simulate', 'limit')])
    def test_mark_mass_actions_need_theta_one(self, action):
        """Actions that simulate the mark masses reject any theta_h below one."""
        with pytest.raises(ValueError, match='theta_h >= 1'):
            RunConfig(theta='0.5,2').validate(action)

    @pytest.mark.parametrize('action', [('sample', 'mpd'), ('verify', 'boundary'),
                                        ('simulate', 'wf'), None])
    def test_small_theta_allowed(self, action):
        RunConfig(theta='0.5,2').validate(action)

    def test_mark_mass_kind(self):
        with pytest.raises(ValueError):
            RunConfig(theta='0.5,2', kind='mark_mass').validate(('simulate', 'wf'))

    @pytest.mark.parametrize('argv, action', [(['verify', 'all'], ('verify', 'all')),
                                              (['sample', 'pd'], ('sample', 'pd')),
                                              (['demo', 'boundary'], ('demo', 'boundary'))])
    def test_action_of(self, argv, action):
        assert action_of(build_parser().parse_args(argv)) == action


class TestSample:

    @pytest.mark.parametrize('law, columns', [('dirichlet', ['z1', 'z2']),
                                              ('pd', ['atom1', 'atom2', 'tail']),
                                              ('grouped', ['w1', 'w2', 'x1_1', 'x1_2', 'x2_1',
                                                           'x2_2', 'z1_1', 'z1_2', 'z2_1',
                                                           'z2_2'])])
    def test_columns(self, tmp_path, law, columns):
        out = tmp_path / f'{law}.csv'
        assert run(['sample', law, '--n', '30', '--trunc', '20', '--top', '2',
                    '--out', str(out)]) == 0
        frame = pd.read_csv(out)
        assert list(frame.columns) == columns
        assert len(frame) == 30

    def test_mpd(self, tmp_path):
        out = tmp_path / 'mpd.csv'
        assert run(['sample', 'mpd', '--n', '40', '--trunc', '50', '--top', '3',
                    '--out', str(out)]) == 0
        frame = pd.read_csv(out)
        assert (frame['w1'] + frame['w2']).to_numpy() == approx(1.0)
        assert 'tail2' in frame.columns

    def test_mpd_tails_hold_unwritten_mass(self, tmp_path):
        """Only ``top`` atoms are written; the tail carries the rest of each mark mass."""
        out = tmp_path / 'mpd.csv'
        assert run(['sample', 'mpd', '--n', '25', '--trunc', '100', '--top', '2',
                    '--out', str(out)]) == 0
        frame = pd.read_csv(out)
        for h in (1, 2):
            total = frame[f'z{h}_1'] + frame[f'z{h}_2'] + frame[f'tail{h}']
            assert total.to_numpy() == approx(frame[f'w{h}'].to_numpy())
            assert f'z{h}_3' not in frame.columns

    def test_reproducible(self, tmp_path):
        first, second = tmp_path / 'a.csv', tmp_path / 'b.csv'
        for out in (first, second):
            run(['sample', 'dirichlet', '--n', '10', '--seed', '5', '--out', str(out)])
        assert first.read_text() == second.read_text()

    def test_stdout(self, capsys):
        assert run(['sample', 'dirichlet', '--n', '3']) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == 'z1,z2'
        assert len(lines) == 4


class TestSimulate:

    @pytest.mark.parametrize('argv', [['wf', '--kind', 'flat'], ['wf', '--kind', 'mark_mass'],
                                      ['wf', '--kind', 'symmetric'], ['skew'],
                                      ['limit', '--approx-k', '16', '--trunc', '50']])
    def test_processes(self, tmp_path, argv):
        out = tmp_path / 'path.csv'
        assert run(['simulate'] + argv + ['--step', '0.01', '--horizon', '0.1', '--top', '2',
                                          '--out', str(out)]) == 0
        frame = pd.read_csv(out)
        assert frame['t'].iloc[-1] == approx(0.1)
        assert len(frame) == 11

    @pytest.mark.parametrize('kind, code', [('mark_mass', 2), ('flat', 0)])
    def test_small_theta(self, tmp_path, kind, code):
        """A theta_h below one is fine for flat paths but not for the mark masses."""
        out = tmp_path / 'path.csv'
        assert run(['simulate', 'wf', '--kind', kind, '--theta', '0.5,2', '--step', '0.01',
                    '--horizon', '0.1', '--out', str(out)]) == code
        assert out.exists() == (code == 0)


class TestVerify:

    def test_boundary(self, tmp_path):
        report = tmp_path / 'report.jsonl'
        assert run(['verify', 'boundary', '--depth', '20', '--n-max', '41',
                    '--report', str(report)]) == 0
        lines = report.read_text().splitlines()
        header = json.loads(lines[0])
        assert header['command'] == 'verify boundary'
        assert header['config']['depth'] == 20
        assert len(lines) == 5
        assert [json.loads(line)['passed'] for line in lines[1:]] == [True, True, False, False]

    def test_unexpected_outcome(self, mocker):
        """A report whose outcome differs from the expected one gives exit code 1."""
        failing = TestReport.from_statistic('forced', 1.0, 0.5)
        mocker.patch('multipd.cli.run_all', return_value=[failing])
        assert run(['verify', 'stationary-exact']) == 1

    def test_expected_failure(self, mocker):
        mocker.patch('multipd.cli.run_all',
                     return_value=[TestReport.from_statistic('flipped', 1.0, 0.5,
                                                             expect_pass=False)])
        assert run(['verify', 'stationary-exact']) == 0

    def test_invalid_parameters(self):
        assert run(['verify', 'boundary', '--theta', '1,-2']) == 2

    def test_small_theta_rejected_before_running(self, mocker):
        runner = mocker.patch('multipd.cli.run_all', return_value=[])
        assert run(['verify', 'all', '--theta', '0.5,2']) == 2
        runner.assert_not_called()

    def test_value_error_in_target(self, mocker):
        mocker.patch('multipd.cli.run_all', side_effect=ValueError('Invalid parameter input.'))
        assert run(['verify', 'moments']) == 2

    def test_all_targets(self, mocker):
        runner = mocker.patch('multipd.cli.run_all', return_value=[])
        assert run(['verify', 'all']) == 0
        assert 'boundary' in runner.call_args[0][1]


class TestDemo:

    def test_boundary_demo(self, tmp_path):
        out = tmp_path / 'boundary.csv'
        assert run(['demo', 'boundary', '--depth', '20', '--n-max', '41', '--top', '2',
                    '--out', str(out)]) == 0
        frame = pd.read_csv(out)
        assert len(frame) == 41
        assert list(frame['parity'][:2]) == ['odd', 'even']
        assert list(frame.columns[:4]) == ['n', 'parity', 'w1', 'w2']

    def test_boundary_demo_limits(self, tmp_path):
        """Written decompositions sit closer to the limit of their own parity."""
        out = tmp_path / 'boundary.csv'
        assert run(['demo', 'boundary', '--depth', '20', '--n-max', '41', '--top', '4',
                    '--out', str(out)]) == 0
        frame = pd.read_csv(out).set_index('n')
        powers = 2.0 ** -np.arange(1, 5)
        limits = {'even': ([0.5, 0.5], powers / 2, powers),
                  'odd': ([0.25, 0.75], powers, 2 / 3 * powers)}

        def distance(row, parity):
            w, x1, x2 = limits[parity]
            return max(np.abs(row[['w1', 'w2']].to_numpy(dtype=float) - w).max(),
                       np.abs(row[[f'x1_{i}' for i in range(1, 5)]].to_numpy(dtype=float)
                              - x1).max(),
                       np.abs(row[[f'x2_{i}' for i in range(1, 5)]].to_numpy(dtype=float)
                              - x2).max())

        for n, row in frame.loc[4:].iterrows():
            own = 'even' if n % 2 == 0 else 'odd'
            other = 'odd' if own == 'even' else 'even'
            assert row['parity'] == own
            assert distance(row, own) == approx(1 / (2 * n) if own == 'even' else 1 / (3 * n))
            assert distance(row, own) < distance(row, other)
        even = frame.loc[40]
        assert [even[f'x1_{i}'] - 1 / 80 for i in range(1, 5)] == approx(powers / 2, abs=1e-12)
        assert [even[f'x2_{i}'] for i in range(1, 5)] == approx(powers, abs=1e-12)

    def test_version(self, capsys):
        with pytest.raises(SystemExit):
            build_parser().parse_args(['--version'])
        assert 'multipd' in capsys.readouterr().out
