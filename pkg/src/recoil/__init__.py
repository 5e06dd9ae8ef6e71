"""Recovery-and-correction data collection for imitation learning.

A fully seeded desk-scale lab: a planar chain-of-corridors task, a scripted
(or browser-driven) teleoperator, a flow-matching action-chunk policy trained
from scratch, four data-collection protocols under a shared frame budget, and
an analysis harness for scaling, composition and test-time-scaling studies.
"""

__version__ = "0.1.0"
