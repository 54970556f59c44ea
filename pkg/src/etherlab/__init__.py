"""Desk-scale laboratory for hindsight experience replay with learned
relabelling: an instruction-following gridworld, a recurrent prioritized-replay
Q-learner, a referential game whose speaker/listener serve as the relabelling
and predicate functions, and a semantic co-occurrence grounding loss that
aligns the emergent language with the environment's instruction language."""

__version__ = "0.1.0"
