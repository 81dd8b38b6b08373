"""Convert a TU-format benchmark directory into the JSON-lines collection format.

    python3 scripts/convert_tu.py /path/to/MUTAG MUTAG data/mutag.jsonl
"""
import sys

from tvgnn.datasets import read_tu_dataset, write_graph_collection


def main(argv):
    if len(argv) != 3:
        print(__doc__, file=sys.stderr)
        return 2
    directory, name, out = argv
    coll = read_tu_dataset(directory, name)
    write_graph_collection(coll, out)
    print(f"{len(coll)} graphs, {coll.class_count} classes -> {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
