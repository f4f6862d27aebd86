"""Discrete de Rham complexes and their serendipity versions on polyhedral meshes."""
