from __future__ import annotations

import pytest

from otadet.geometry import BoxXYXY


VAN_CAPTION = (
    "A black van is driving the left side onto the straight road, "
    "a white sedan driving in front of it at the top right."
)

# canned completion reply for the van caption, as the service returns it
VAN_RESPONSE = """
{
  "primary_target": "van",
  "attributes": [
    {
      "aspect": "category",
      "description": "van",
      "caption_evidence": ["A black van"],
      "confidence": 1.0
    },
    {
      "aspect": "color",
      "description": "black",
      "caption_evidence": ["A black van"],
      "confidence": 1.0
    },
    {
      "aspect": "state",
      "description": "is driving the left side onto the straight road",
      "caption_evidence": ["is driving the left side onto..."],
      "confidence": 1.0
    },
    {
      "aspect": "spatial_relation",
      "description": "a white sedan driving in front of it at the top right",
      "caption_evidence": ["a white sedan driving in front of it..."],
      "confidence": 1.0
    }
  ],
  "analysis": "Target is 'van'. The action phrase is kept complete; the clause about the white sedan is a spatial reference."
}
"""


@pytest.fixture
def van_caption() -> str:
    return VAN_CAPTION


@pytest.fixture
def van_response() -> str:
    return VAN_RESPONSE


def box(x1: float, y1: float, x2: float, y2: float, frame: str = "pixel") -> BoxXYXY:
    return BoxXYXY(x1, y1, x2, y2, frame=frame)
