"""Attribution evaluation on grid settings."""
