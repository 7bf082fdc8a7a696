"""Divide-and-conquer composite quantile regression for the conditional mean."""
