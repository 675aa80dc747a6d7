"""Hand-built victims and small worlds shared by the attack and defense tests."""
import numpy as np

from samdp_lab.envs import ACTIONS, GridWorld

SMALL_LAYOUT = ("..A", ".#.", "S.B")


class ShortestPathVictim:
    """Greedy victim that walks a shortest path to the world's victim goal."""

    kind = "discrete"

    def __init__(self, world: GridWorld, goal=None):
        self.world = world
        self.dist = world.distances_to(goal or world.goal_victim)

    def probs(self, obs) -> np.ndarray:
        cells = self.world.decode(np.atleast_2d(obs))
        out = np.zeros((len(cells), len(ACTIONS)))
        for i, c in enumerate(cells):
            c = tuple(c)
            best = min(range(len(ACTIONS)),
                       key=lambda a: (self.dist.get(self.world.move(c, a), 10**6), a))
            out[i, best] = 1.0
        return out

    def act(self, obs, rng, deterministic: bool = False):
        return np.argmax(self.probs(obs), axis=1)


def everywhere(world: GridWorld) -> GridWorld:
    return world.with_starts(world.nonterminal_cells)
