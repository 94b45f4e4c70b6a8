#!/usr/bin/env python3
"""
Result Analysis Script
Plot the CSV tables emitted by a cgl_cli.py run directory.
"""

import argparse
import json
import os
import sys

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import seaborn as sns


def _save(fig, out_dir, name):
    path = os.path.join(out_dir, "plots", f"{name}.png")
    fig.savefig(path, dpi=300, bbox_inches='tight')
    plt.close(fig)
    return path


def plot_trajectory(df, out_dir):
    """Mean energy series with the moment bound."""
    fig, axes = plt.subplots(1, 2, figsize=(15, 6))
    fig.suptitle('Ensemble Energy', fontsize=16, fontweight='bold')

    axes[0].plot(df['time'], df['norm_sq_mean'], linewidth=2, label='mean ||u||²')
    axes[0].fill_between(df['time'], df['norm_sq_mean'] - 3 * df['norm_sq_se'],
                         df['norm_sq_mean'] + 3 * df['norm_sq_se'], alpha=0.3)
    axes[0].plot(df['time'], df['moment_bound'], linestyle='--', color='black', label='bound')
    axes[0].set_xlabel('t')
    axes[0].set_ylabel('||u||²')
    axes[0].legend()
    axes[0].grid(True, alpha=0.3)

    for column in ('E_mean', 'E_hat_psi_mean', 'E_psi_mean'):
        axes[1].plot(df['time'], df[column], linewidth=2, label=column)
    axes[1].set_xlabel('t')
    axes[1].set_ylabel('energy')
    axes[1].legend()
    axes[1].grid(True, alpha=0.3)
    return _save(fig, out_dir, 'trajectory')


def plot_squeeze(df, out_dir):
    fig, ax = plt.subplots(figsize=(10, 6))
    ax.semilogy(df['time'], df['w_norm_sq_mean'], linewidth=2, label='mean ||w||²')
    ax.semilogy(df['time'], df['w_norm_sq_median'], linewidth=2, label='median ||w||²')
    ax.semilogy(df['time'], df['pn_w_norm_sq_mean'], linewidth=2, linestyle='--', label='mean ||P_N w||²')
    ax.set_title('Coupled Pair Distance', fontsize=14, fontweight='bold')
    ax.set_xlabel('t')
    ax.legend()
    ax.grid(True, alpha=0.3)
    return _save(fig, out_dir, 'squeeze')


def plot_mixing(df, out_dir):
    fig, ax = plt.subplots(figsize=(10, 6))
    ax.errorbar(df['time'], df['distance'], yerr=3 * df['se'], marker='o', linewidth=2, capsize=3)
    positive = df['distance'] > 0
    if positive.any():
        ax.set_yscale('log')
    ax.set_title('Dual-Lipschitz Proxy Distance', fontsize=14, fontweight='bold')
    ax.set_xlabel('t')
    ax.set_ylabel('distance')
    ax.grid(True, alpha=0.3)
    return _save(fig, out_dir, 'mixing')


def plot_frequencies(df, x, name, out_dir):
    fig, ax = plt.subplots(figsize=(10, 6))
    floored = np.maximum(df['frequency'], 1e-6)
    ax.semilogy(df[x], floored, marker='s', linewidth=2, markersize=8)
    if 'bound' in df:
        ax.semilogy(df[x], df['bound'], linestyle='--', color='black', label='bound')
        ax.legend()
    ax.set_title(name.replace('_', ' ').title(), fontsize=14, fontweight='bold')
    ax.set_xlabel(x)
    ax.set_ylabel('frequency')
    ax.grid(True, alpha=0.3)
    return _save(fig, out_dir, name)


def plot_xy(df, x, y, name, out_dir, loglog=False):
    fig, ax = plt.subplots(figsize=(10, 6))
    ax.plot(df[x], df[y], marker='o', linewidth=2, markersize=8)
    if loglog:
        ax.set_xscale('log')
        ax.set_yscale('log')
    ax.set_title(name.replace('_', ' ').title(), fontsize=14, fontweight='bold')
    ax.set_xlabel(x)
    ax.set_ylabel(y)
    ax.grid(True, alpha=0.3)
    return _save(fig, out_dir, name)


def plot_run(out_dir):
    """
    Draw one figure per CSV table found in a run directory.

    Args:
        out_dir: directory written by a cgl_cli.py run

    Returns:
        List of PNG paths written to out_dir/plots
    """
    os.makedirs(os.path.join(out_dir, 'plots'), exist_ok=True)
    plt.style.use('default')
    sns.set_palette("husl")

    def table(name):
        path = os.path.join(out_dir, f"{name}.csv")
        return pd.read_csv(path) if os.path.exists(path) else None

    paths = []
    if (df := table('trajectory')) is not None:
        paths.append(plot_trajectory(df, out_dir))
    if (df := table('squeeze')) is not None:
        paths.append(plot_squeeze(df, out_dir))
    if (df := table('mixing')) is not None:
        paths.append(plot_mixing(df, out_dir))
    for name, x in (('energy_tails', 'rho'), ('unweighted_energy_tail', 'rho'), ('stopping_tails', 'l')):
        if (df := table(name)) is not None:
            paths.append(plot_frequencies(df, x, name, out_dir))
    if (df := table('squeezing')) is not None:
        paths.append(plot_xy(df, 'N', 'success_fraction', 'squeezing', out_dir))
    if (df := table('novikov_scaling')) is not None:
        paths.append(plot_xy(df, 'd', 'mean_integral', 'novikov_scaling', out_dir, loglog=True))
    if (df := table('poincare')) is not None:
        paths.append(plot_xy(df, 'N', 'epsilon', 'poincare', out_dir))
    if (df := table('recurrence_growth')) is not None:
        paths.append(plot_xy(df, 'u0_norm', 'moment', 'recurrence_growth', out_dir, loglog=True))
    return paths


def print_report(out_dir):
    path = os.path.join(out_dir, 'report.json')
    if not os.path.exists(path):
        print("⚠️ No report.json found")
        return
    with open(path) as handle:
        report = json.load(handle)
    print(f"\n🔍 {report['kind']} run {report['config_hash'][:12]}: {report['verdict']}")
    print("-" * 30)
    for check in report['reports']:
        marker = "✅" if check['verdict'] == 'PASS' else "❌"
        print(f"{marker} {check['name']}")
        for key, value in sorted(check['metrics'].items()):
            if isinstance(value, float):
                print(f"   • {key}: {value:.6g}")


def main():
    parser = argparse.ArgumentParser(description="Plot the tables of a run directory")
    parser.add_argument('out_dir', help='Run directory written by cgl_cli.py')
    args = parser.parse_args()

    if not os.path.isdir(args.out_dir):
        print(f"❌ Not a directory: {args.out_dir}")
        return 4

    print("📊 CGL Run Analysis")
    print("=" * 60)
    print_report(args.out_dir)
    paths = plot_run(args.out_dir)
    print(f"\n📈 {len(paths)} plot(s) saved to {os.path.join(args.out_dir, 'plots')}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
