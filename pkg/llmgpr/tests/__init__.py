"""Tests of llmgpr package."""
