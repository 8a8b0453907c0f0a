"""Experiment driver scripts"""
