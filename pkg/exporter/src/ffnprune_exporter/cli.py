"""Command-line front end: export a decoder checkpoint and/or a text corpus."""

from __future__ import annotations

import argparse
import sys

from .export import ExportError, export_corpus, export_model


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ffnprune-export",
        description="Convert a llama-family decoder and a text corpus into the "
                    "pruning engine's checkpoint and corpus formats")
    parser.add_argument("--model", required=True,
                        help="source model id or local path (transformers format)")
    parser.add_argument("--out", required=True, help="output checkpoint directory")
    parser.add_argument("--corpus", nargs="*", default=[],
                        help="text files to tokenize into tokens.u32")
    parser.add_argument("--corpus-out", help="corpus output directory "
                                             "(default: <out>/corpus)")
    parser.add_argument("--tokenizer",
                        help="tokenizer id or path (default: same as --model)")
    parser.add_argument("--reference-seqs", type=int, default=8,
                        help="number of reference sequences for parity fixtures")
    parser.add_argument("--reference-len", type=int, default=16)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    try:
        from transformers import AutoModelForCausalLM, AutoTokenizer

        source = AutoModelForCausalLM.from_pretrained(args.model)
        manifest = export_model(source, args.out,
                                reference_seqs=args.reference_seqs,
                                reference_len=args.reference_len,
                                seed=args.seed, source_id=args.model)
        print(f"exported {len(manifest['mapping'])} tensors to {args.out}")
        if args.corpus:
            tok = AutoTokenizer.from_pretrained(args.tokenizer or args.model)
            out_dir = args.corpus_out or f"{args.out}/corpus"
            count = export_corpus(args.corpus, tok, out_dir,
                                  expected_vocab=source.config.vocab_size)
            print(f"tokenized {count} tokens to {out_dir}")
        return 0
    except ExportError as exc:
        print(f"error[E_EXPORT] {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
