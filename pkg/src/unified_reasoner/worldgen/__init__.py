"""Synthetic stand-ins for CATER (shell-game videos) and ACRE (blicket panels)."""

from .acre import AcreConfig, AcreEpisode, acre_oracle, classify_question, gen_acre_episode
from .cater import CaterConfig, VideoSample, cell_of, gen_cater_episode, sample_frames
from .render import RenderConfig, SceneObject, render_frame

__all__ = [
    "AcreConfig", "AcreEpisode", "acre_oracle", "classify_question", "gen_acre_episode",
    "CaterConfig", "VideoSample", "cell_of", "gen_cater_episode", "sample_frames",
    "RenderConfig", "SceneObject", "render_frame",
]
