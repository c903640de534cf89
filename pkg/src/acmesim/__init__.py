"""Three-tier (cloud / edge / device) adaptive model customization simulator."""

__version__ = "0.1.0"
