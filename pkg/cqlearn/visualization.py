import networkx as nx
import numpy as np
from matplotlib import pyplot as plt

from cqlearn.planning import rollout_greedy


class MdpVisualizer:
    """
    A class for drawing finite MDPs with unsafe states and policy paths.

    Attributes
    ----------
    mdp : :class:`~cqlearn.mdp.FiniteMdp`
        the MDP to be drawn
    graph : networkx.DiGraph
        support graph of the MDP
    unsafe : set
        states drawn as unsafe
    """

    def __init__(self, mdp, unsafe=()):
        """
        Parameters
        ----------
        mdp : :class:`~cqlearn.mdp.FiniteMdp`
            the MDP to be drawn
        unsafe : iterable of int
            states marked as unsafe (red outline).
        """
        self.mdp = mdp
        self.graph = mdp.support_graph()
        self.unsafe = set(int(s) for s in unsafe)

    def get_pos(self, node_distance=(1, 1)):
        """
        Returns node positions: one column per topological generation for acyclic MDPs,
        a spring layout otherwise.

        Parameters
        ----------
        node_distance : tuple
            Distance multiplication factor between nodes for x and y directions.

        Returns
        -------
        pos : dict
            state -> (x, y)
        """
        if nx.is_directed_acyclic_graph(self.graph):
            pos = {}
            for x, generation in enumerate(nx.topological_generations(self.graph)):
                for y, node in enumerate(sorted(generation)):
                    pos[node] = (x * node_distance[0], -y * node_distance[1])
            return pos
        pos = nx.spring_layout(self.graph, seed=0)
        return {k: (v[0] * node_distance[0], v[1] * node_distance[1]) for k, v in pos.items()}

    def policy_path(self, policy, state=None, max_steps=1000):
        """states visited by ``policy`` along the most likely successors"""
        if state is None:
            state = int(np.argmax(self.mdp.initial_state_dist))
        path = [state]
        for _ in range(max_steps):
            if self.mdp.terminal[state]:
                break
            action = policy(state) if callable(policy) else int(np.asarray(policy)[state])
            state = int(np.argmax(self.mdp.transition[state, action]))
            path.append(state)
        return path

    def visualize(self, policies=None, node_distance=(1.5, 1), figsize=None, ax=None, filename=None):
        """
        Draws the MDP. Terminal states are filled gray, unsafe states outlined red, and the
        path of every given policy is overlaid as colored arrows with its return in the legend.

        Parameters
        ----------
        policies : dict, optional
            name -> policy (callable or action per state).
        node_distance : tuple
            Distance multiplication factor between nodes for x and y directions.
        figsize : tuple
            Figure size of the plot.
        ax : matplotlib.axes.Axes, optional
            axes to draw on; a new figure is created otherwise.
        filename : str
            If given, the plot is saved to this file.

        Returns
        -------
        ax : matplotlib.axes.Axes
        """
        pos = self.get_pos(node_distance)
        if ax is None:
            if figsize is None:
                width = max(x for x, _ in pos.values()) + 2
                height = max(-y for _, y in pos.values()) + 2
                figsize = (max(width, 4), max(height, 3))
            _, ax = plt.subplots(figsize=figsize)

        nx.draw_networkx_edges(self.graph, pos, ax=ax, edge_color="lightgray", arrows=True)
        for node in self.graph.nodes():
            edge = "red" if node in self.unsafe else "black"
            face = "lightgray" if self.mdp.terminal[node] else "white"
            ax.scatter(*pos[node], edgecolor=edge, facecolor=face, s=400, zorder=2, linewidths=2)
        labels = {i: label for i, label in enumerate(self.mdp.state_labels)}
        nx.draw_networkx_labels(self.graph, pos, labels=labels, ax=ax, font_size=8)

        colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
        for k, (name, policy) in enumerate((policies or {}).items()):
            path = self.policy_path(policy)
            total, _ = rollout_greedy(self.mdp, policy)
            edges = list(zip(path, path[1:]))
            nx.draw_networkx_edges(
                self.graph, pos, edgelist=edges, ax=ax, edge_color=colors[k % len(colors)], width=2.5
            )
            ax.plot([], [], color=colors[k % len(colors)], label=f"{name} ({total:+g})")
        if policies:
            ax.legend(loc="best", fontsize=8)
        ax.set_axis_off()
        if filename is not None:
            ax.figure.savefig(filename)
        return ax


def plot_tree_sweep(summary, ax=None, filename=None):
    """
    mean samples to convergence over the number of branches, one line per algorithm

    Parameters
    ----------
    summary : pandas.DataFrame
        tree-sweep summary with ``branches``, ``algorithm``, ``mean_samples`` and
        ``std_samples`` columns.
    """
    if ax is None:
        _, ax = plt.subplots(figsize=(5, 3.5))
    for algorithm, group in summary.groupby("algorithm", sort=True):
        group = group.sort_values("branches")
        ax.errorbar(group["branches"], group["mean_samples"], yerr=group["std_samples"], label=algorithm, capsize=3)
    ax.set_xlabel("branches")
    ax.set_ylabel("samples to convergence")
    ax.legend()
    if filename is not None:
        ax.figure.savefig(filename)
    return ax


def plot_tradeoff(results, ax=None, incumbent=None, filename=None):
    """
    speed against violations of every random-search sample

    Parameters
    ----------
    results : pandas.DataFrame
        search results with ``mean_speed``, ``violations`` and ``collapsed`` columns.
    incumbent : pandas.Series, optional
        highlighted with a star.
    """
    if ax is None:
        _, ax = plt.subplots(figsize=(5, 3.5))
    collapsed = results["collapsed"].astype(bool)
    ax.scatter(results.loc[~collapsed, "mean_speed"], results.loc[~collapsed, "violations"], label="sampled")
    if collapsed.any():
        ax.scatter(
            results.loc[collapsed, "mean_speed"],
            results.loc[collapsed, "violations"],
            marker="x",
            color="gray",
            label="collapsed",
        )
    if incumbent is not None:
        best = (incumbent["mean_speed"], incumbent["violations"])
        ax.scatter(*best, marker="*", s=200, color="red", label="incumbent")
    ax.set_xlabel("mean speed [m/s]")
    ax.set_ylabel("violations per episode")
    ax.legend()
    if filename is not None:
        ax.figure.savefig(filename)
    return ax
