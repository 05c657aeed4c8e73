#!/usr/bin/env python3
"""Diagnostic script to summarize datasets and, if present, their standardized fields."""

import os
import sys
sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), '..', 'src'))

from pathlib import Path

from services.corpus_service import dataset_stats, load_dataset
from services.standardizer_service import load_standardized


def field_coverage(tools):
    """Share of tools with a non-empty value per field, plus parameter flag counts."""
    n = len(tools) or 1
    params = [p for t in tools for p in t.parameters]
    return {
        'description': sum(1 for t in tools if t.description.strip()) / n,
        'parameters': sum(1 for t in tools if t.parameters) / n,
        'response': sum(1 for t in tools if t.response.strip()) / n,
        'examples': sum(1 for t in tools if t.examples) / n,
        'required': sum(1 for p in params if p.required),
        'optional': sum(1 for p in params if not p.required),
    }


def main():
    if len(sys.argv) < 2:
        print("usage: dataset_stats.py DATASET_DIR [DATASET_DIR ...] [--workdir DIR]")
        return 1

    args = sys.argv[1:]
    workdir = None
    if '--workdir' in args:
        i = args.index('--workdir')
        workdir = Path(args[i + 1])
        args = args[:i] + args[i + 2:]

    print(f"{'dataset':<20} | {'queries':>8} | {'tools':>8} | {'tools/query':>11}")
    print("-" * 56)
    datasets = []
    for path in args:
        try:
            dataset = load_dataset(path)
        except Exception as e:
            print(f"{path:<20} | Error: {e}")
            continue
        datasets.append(dataset)
        stats = dataset_stats(dataset)
        print(f"{stats['name']:<20} | {stats['queries']:>8} | {stats['tools']:>8} | {stats['tools_per_query']:>11.2f}")

    standardized = workdir / "standardized.jsonl" if workdir else None
    if standardized is None or not standardized.exists():
        return 0

    tools = {t.tool_id: t for t in load_standardized(standardized)}
    for dataset in datasets:
        mine = [tools[t.id] for t in dataset.tools if t.id in tools]
        print()
        print("=" * 56)
        print(f"STANDARDIZED: {dataset.name} ({len(mine)}/{len(dataset.tools)} tools)")
        print("=" * 56)
        coverage = field_coverage(mine)
        for name in ('description', 'parameters', 'response', 'examples'):
            print(f"  {name:<12} {coverage[name]:>7.1%}")
        print(f"  parameters: {coverage['required']} required, {coverage['optional']} optional")
    return 0


if __name__ == "__main__":
    sys.exit(main())
