from .geom import Pose, Trajectory
