"""Small matplotlib helpers. Everything renders straight to files."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def bar_figure(path, labels, values, errors=None, ylabel="", title=""):
    fig, ax = plt.subplots(figsize=(max(4, 1.1 * len(labels)), 3.2))
    xs = range(len(labels))
    ax.bar(xs, values, yerr=errors, capsize=3, color="#4878a8")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel(ylabel)
    ax.set_title(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def line_figure(path, series, xlabel="", ylabel="", title=""):
    """series: {name: (xs, ys)}"""
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    for name, (xs, ys) in series.items():
        ax.plot(xs, ys, label=name, linewidth=1.4)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title, fontsize=10)
    if len(series) > 1:
        ax.legend(fontsize=7)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def scatter_figure(path, x, y, xlabel="", ylabel="", title=""):
    fig, ax = plt.subplots(figsize=(4.2, 3.4))
    ax.scatter(x, y, s=8, alpha=0.6, color="#a85448")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title, fontsize=10)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
