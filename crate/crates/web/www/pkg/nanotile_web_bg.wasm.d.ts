/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const cost_at: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const l2_plan: (a: number, b: number, c: number) => [number, number, number, number];
export const react: (a: number, b: number, c: number) => [number, number, number, number];
export const sweep: (a: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_start: () => void;
