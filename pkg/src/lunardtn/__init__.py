"""Packet-level simulator of a multi-rover lunar delay-tolerant network.

Rovers explore a gridded map and generate map packets that must reach a
lander through intermittent rover-to-rover and rover-to-lander links. Three
routing policies are compared: binary Spray-and-Wait, shortest-path Greedy on
the current topology, and a graph-attention Double-DQN policy trained
centrally and executed per rover.
"""

__version__ = "0.1.0"
