"""The whole pipeline through the CLI, start to finish.

gen-synthetic trains a small GQA decoder on a Markov corpus and dumps its
key/value activation streams; analyze recovers per-(layer, kind) spectra
and NER; compress exports optimal factor pairs with predicted-vs-measured
errors; pplgrid sweeps perplexity over retain ratios; ndppl condenses the
grid into one degradation score per cache side.
"""

import json
import tempfile
from pathlib import Path

from kvcore.cli import main

with tempfile.TemporaryDirectory() as td:
    root = Path(td)
    gen, spectra, factors, grid, nd = (
        root / "gen", root / "spectra", root / "factors", root / "grid", root / "nd"
    )

    print("=== gen-synthetic " + "=" * 50)
    main(["gen-synthetic", "--out", str(gen),
          "--n-seqs", "8", "--seq-len", "64", "--train-steps", "50"])

    print("\n=== analyze " + "=" * 56)
    main(["analyze", "--streams", str(gen), "--out", str(spectra)])
    for row in json.loads((spectra / "ner_report.json").read_text()):
        print(f"   layer {row['layer']} {row['kind']:5s}: "
              f"rank {row['rank']:2d}, NER {row['ner']:.4f}")

    print("\n=== compress " + "=" * 55)
    main(["compress", "--spectra", str(spectra),
          "--checkpoint", str(gen / "model.kvcm"), "--streams", str(gen),
          "--out", str(factors), "--ratios", "0.25,0.5,1.0"])

    print("\n=== pplgrid " + "=" * 56)
    main(["pplgrid", "--checkpoint", str(gen / "model.kvcm"),
          "--corpus", str(gen / "corpus.u16"), "--spectra", str(spectra),
          "--out", str(grid), "--seq-len", "64",
          "--key-ratios", "0.25,0.5,0.75,1.0",
          "--value-ratios", "0.25,0.5,0.75,1.0"])
    print((grid / "ppl_grid.csv").read_text().strip())

    print("\n=== ndppl " + "=" * 58)
    main(["ndppl", "--grid", str(grid / "ppl_grid.csv"), "--out", str(nd)])
    rep = json.loads((nd / "ndppl_report.json").read_text())
    print(f"\nND-PPL key side:   {rep['nd_ppl_key']:.4f}")
    print(f"ND-PPL value side: {rep['nd_ppl_value']:.4f}")
    print("\npositive values mean compression hurt; the size tells how much, "
          "normalized to be comparable across corpora.")
