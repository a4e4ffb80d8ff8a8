"""Inventory dynamics lab: demand simulation, NODE/UDE training, forecast evaluation."""
