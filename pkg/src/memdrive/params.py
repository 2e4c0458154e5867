"""Physical and behavioral constants shared by the simulator modules.

Values are module level so the compiled kernels can capture them as
compile time constants while the pure numpy path reads the same objects.
"""

import math

# Longitudinal model (IDM).
A_MAX = 3.0        # maximum acceleration, m/s^2
B_COMFORT = 2.0    # comfortable braking used in the desired-gap term, m/s^2
B_MAX = 5.0        # hard braking floor, m/s^2 (accelerations clamp to [-B_MAX, A_MAX])
DELTA = 4.0        # free-flow exponent
T_HEADWAY = 1.5    # desired time headway, s
S0 = 5.0           # standstill jam distance, m

# Precomputed 2*sqrt(a_max*b); keep a single shared value so both kernel
# backends evaluate the identical double.
TWO_SQRT_AB = 2.0 * math.sqrt(A_MAX * B_COMFORT)

# Lane-change model (MOBIL).
POLITENESS = 0.3      # weight of other drivers' gains
DELTA_A_THRESHOLD = 0.2  # net gain required to bother changing, m/s^2
B_SAFE = 2.0          # max braking imposed on the new follower, m/s^2

# Decision frames a background vehicle must wait after completing a lane
# change before starting another.  Changes commit over a whole decision
# frame here, so without a refractory period simultaneous MOBIL decisions
# oscillate on freshly spawned traffic.
LANE_CHANGE_COOLDOWN = 3

# Road and vehicle geometry.
LANE_WIDTH = 4.0
VEHICLE_LENGTH = 5.0
VEHICLE_WIDTH = 2.0

# Perception.
PERCEPTION_RANGE = 100.0
MAX_OBSERVED = 32

# Ego speed ladder, m/s. Index 3 is the spawn level.
SPEED_LEVELS = (10.0, 15.0, 20.0, 25.0, 32.0)
EGO_START_LEVEL = 3

# Background traffic.
NPC_SPEED_MIN = 15.0
NPC_SPEED_MAX = 25.0
