# -*- coding: utf-8 -*-

"""
The boundary sequence: points that converge, while their decompositions into mark masses and
within-mark frequencies alternate between two limits.
"""

from multipd.verify import boundary_frame, boundary_report, reports_to_frame


if __name__ == '__main__':

    frame = boundary_frame(depth=40, n_max=200, top=3)
    frame.to_csv('boundary_sequence.csv', index=False, float_format='%.17g')
    print(frame.groupby('parity')[['w1', 'w2']].last())

    print(reports_to_frame(boundary_report(depth=40, n_max=200)).to_string(index=False))
