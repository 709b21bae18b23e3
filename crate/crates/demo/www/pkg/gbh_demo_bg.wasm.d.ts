/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_jspanel_free: (a: number, b: number) => void;
export const class_names: () => [number, number];
export const complexityTable: (a: number) => [number, number, number, number];
export const ghostCost: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
export const jspanel_boxes: (a: number) => [number, number];
export const jspanel_rgba: (a: number) => [number, number];
export const jspanel_size: (a: number) => number;
export const nmsDemo: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number];
export const synthPanel: (a: number, b: number, c: number) => [number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_drop_slice: (a: number, b: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;
