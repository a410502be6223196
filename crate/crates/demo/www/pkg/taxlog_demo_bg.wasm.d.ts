/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const bundled_facts: () => [number, number];
export const bundled_statutes: () => [number, number];
export const perturb_rules: (a: number) => [number, number];
export const simulate_audit: (a: number, b: number, c: number, d: number) => [number, number];
export const solve_query: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
