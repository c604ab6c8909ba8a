"""
report.py

Cross-run comparison. Reads `metrics.jsonl` and `run.json` from each run
directory and writes, into one output directory:
    report.md         one table row per run, values from its final records
    report.html       the same table rendered with mistune
    loss_curves.png   training loss per epoch, one line per run
    efficiency.png    weighted F1 against trainable parameters, marker area
                      proportional to wall time
"""

import json
import logging
import os

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import mistune

from utils.naming import row_label

logger = logging.getLogger('omnifuse.report')

COLUMNS = ('run', 'command', 'epochs', 'loss_total', 'f1_weighted', 'f1_macro', 'f1_micro', 'parameters', 'wall_s')

plt.rcParams.update({
    'font.size': 9,
    'axes.labelsize': 9,
    'legend.fontsize': 7,
    'figure.figsize': (6.0, 3.8),
})


def read_run(run_dir):
    """Returns (records, info) or None when the run has no metrics log."""
    path = os.path.join(run_dir, 'metrics.jsonl')
    if not os.path.exists(path):
        logger.warning(f"{run_dir}: no metrics.jsonl, skipping.")
        return None
    with open(path, 'r', encoding='utf-8') as f:
        records = [json.loads(line) for line in f if line.strip()]
    if not records:
        logger.warning(f"{run_dir}: empty metrics.jsonl, skipping.")
        return None
    info = {}
    info_path = os.path.join(run_dir, 'run.json')
    if os.path.exists(info_path):
        with open(info_path, 'r', encoding='utf-8') as f:
            info = json.load(f)
    return records, info


def summarize(run_dir, records, info):
    """
    A table row. Scores come from the last `test`/`eval` record when there
    is one, otherwise from the last epoch record.
    """
    epochs = [r for r in records if r.get('epoch') is not None]
    scored = [r for r in records if r.get('phase') in ('test', 'eval')]
    final = scored[-1] if scored else epochs[-1] if epochs else records[-1]
    return {
        'run': row_label(run_dir),
        'command': info.get('command') or final.get('phase'),
        'epochs': epochs[-1]['epoch'] if epochs else 0,
        'loss_total': final.get('loss_total'),
        'f1_weighted': final.get('f1_weighted'),
        'f1_macro': final.get('f1_macro'),
        'f1_micro': final.get('f1_micro'),
        'parameters': (info.get('parameters') or {}).get('total'),
        'wall_s': info.get('wall_s'),
    }


def _cell(value):
    if value is None:
        return '-'
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def markdown_table(rows):
    lines = ['| ' + ' | '.join(COLUMNS) + ' |', '|' + '---|' * len(COLUMNS)]
    for row in rows:
        lines.append('| ' + ' | '.join(_cell(row[c]) for c in COLUMNS) + ' |')
    return '\n'.join(lines) + '\n'


def plot_loss_curves(runs, path):
    fig, ax = plt.subplots()
    for label, records in runs:
        points = [(r['epoch'], r['loss_total']) for r in records
                  if r.get('epoch') is not None and r.get('loss_total') is not None]
        if points:
            ax.plot(*zip(*points), marker='.', label=label)
    ax.set_xlabel('epoch')
    ax.set_ylabel('training loss')
    if ax.lines:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_efficiency(rows, path):
    fig, ax = plt.subplots()
    points = [r for r in rows if r['parameters'] and r['f1_weighted'] is not None]
    if points:
        longest = max(r['wall_s'] or 0.0 for r in points) or 1.0
        ax.scatter([r['parameters'] for r in points], [r['f1_weighted'] for r in points],
                   s=[20 + 400 * (r['wall_s'] or 0.0) / longest for r in points], alpha=0.6)
        for r in points:
            ax.annotate(r['run'], (r['parameters'], r['f1_weighted']), fontsize=6)
        ax.set_xscale('log')
    ax.set_xlabel('trainable parameters')
    ax.set_ylabel('weighted F1')
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def build_report(run_dirs, out_dir):
    """Writes the report files and returns the table rows."""
    os.makedirs(out_dir, exist_ok=True)
    rows, curves = [], []
    for run_dir in run_dirs:
        loaded = read_run(run_dir)
        if loaded is None:
            continue
        records, info = loaded
        row = summarize(run_dir, records, info)
        rows.append(row)
        curves.append((row['run'], records))

    table = markdown_table(rows)
    with open(os.path.join(out_dir, 'report.md'), 'w', encoding='utf-8') as f:
        f.write('# Run comparison\n\n' + table)
    render = mistune.create_markdown(plugins=['table'])
    with open(os.path.join(out_dir, 'report.html'), 'w', encoding='utf-8') as f:
        f.write(render('# Run comparison\n\n' + table))
    plot_loss_curves(curves, os.path.join(out_dir, 'loss_curves.png'))
    plot_efficiency(rows, os.path.join(out_dir, 'efficiency.png'))
    logger.info(f"Report over {len(rows)} of {len(run_dirs)} run(s) written to {out_dir}.")
    return rows
