"""Command-line adapter for the third-party ``pesq`` package (ITU-T P.862 wide-band).

    python -m sesr.pesq_tool REF.wav DEG.wav

Usable as ``SESR_PESQ_CMD="python -m sesr.pesq_tool {ref} {deg}"``.
"""

import sys

from .dsp import read_wav


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 2:
        print("usage: python -m sesr.pesq_tool REF.wav DEG.wav", file=sys.stderr)
        return 2
    from pesq import pesq

    ref, deg = read_wav(argv[0]), read_wav(argv[1])
    n = min(len(ref), len(deg))
    print(f"{pesq(16000, ref.samples[:n], deg.samples[:n], 'wb'):.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
