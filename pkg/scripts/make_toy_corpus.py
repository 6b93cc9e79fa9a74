"""Write the synthetic corpora used by the smoke runs.

    python scripts/make_toy_corpus.py tones --out toy/train --per-class 10 --seed 0
    python scripts/make_toy_corpus.py words --out toy/words --speakers 3 --utts 4
"""
import argparse

from spoofsplice.toy import write_tone_corpus, write_word_corpus


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="kind", required=True)
    t = sub.add_parser("tones", help="three-class tone clips plus manifest.csv (path,attack_id)")
    t.add_argument("--out", required=True)
    t.add_argument("--per-class", type=int, default=10)
    t.add_argument("--duration", type=float, default=1.0, help="seconds per clip")
    t.add_argument("--seed", type=int, default=0)
    w = sub.add_parser("words", help="<speaker>/<utt>.wav + .wrd word-aligned utterances")
    w.add_argument("--out", required=True)
    w.add_argument("--speakers", type=int, default=2)
    w.add_argument("--utts", type=int, default=3)
    w.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    if args.kind == "tones":
        path = write_tone_corpus(args.out, args.per_class, args.seed, args.duration)
    else:
        path = write_word_corpus(args.out, args.speakers, args.utts, args.seed)
    print(path)


if __name__ == "__main__":
    main()
